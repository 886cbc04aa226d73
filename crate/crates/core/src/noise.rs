//! Keyed base randomness.
//!
//! Every draw is addressed by `(channel, key)`: the pair selects an
//! independent ChaCha8 stream under the run seed, so the values an event
//! receives never depend on how many draws other events or channels consumed.
//! Holding the noise fixed and moving the parameters therefore changes the
//! generated coordinates smoothly until a discrete decision flips.

use rand_chacha::rand_core::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Channel {
    BackgroundTime,
    BackgroundLocation,
    OffspringCount,
    OffspringTime,
    OffspringOffset,
    Thinning,
    Victimization,
}

impl Channel {
    pub const ALL: [Channel; 7] = [
        Channel::BackgroundTime,
        Channel::BackgroundLocation,
        Channel::OffspringCount,
        Channel::OffspringTime,
        Channel::OffspringOffset,
        Channel::Thinning,
        Channel::Victimization,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Channel::BackgroundTime => "background-time",
            Channel::BackgroundLocation => "background-location",
            Channel::OffspringCount => "offspring-count",
            Channel::OffspringTime => "offspring-time",
            Channel::OffspringOffset => "offspring-offset",
            Channel::Thinning => "thinning",
            Channel::Victimization => "victimization",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Default per-channel draw budget.
pub const DEFAULT_CAPACITY: u64 = 1 << 28;

#[derive(Debug, Clone)]
pub struct BaseNoise {
    seed: u64,
    key: [u8; 32],
    capacity: u64,
    used: [u64; 7],
}

impl BaseNoise {
    pub fn new(seed: u64) -> Self {
        Self::with_capacity(seed, DEFAULT_CAPACITY)
    }

    pub fn with_capacity(seed: u64, capacity: u64) -> Self {
        let key = ChaCha8Rng::seed_from_u64(seed).get_seed();
        Self { seed, key, capacity, used: [0; 7] }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Draws consumed so far on `channel`.
    pub fn used(&self, channel: Channel) -> u64 {
        self.used[channel.index()]
    }

    fn stream(&mut self, channel: Channel, key: u64, draws: u64) -> Result<ChaCha8Rng> {
        let used = &mut self.used[channel.index()];
        if *used + draws > self.capacity {
            return Err(Error::NoiseExhausted { channel: channel.name(), capacity: self.capacity });
        }
        *used += draws;
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(mix(key ^ mix(channel.index() as u64 + 1)));
        Ok(rng)
    }

    /// `N` uniforms on the open interval `(0, 1)`.
    pub fn uniforms<const N: usize>(&mut self, channel: Channel, key: u64) -> Result<[f64; N]> {
        let mut rng = self.stream(channel, key, N as u64)?;
        Ok(std::array::from_fn(|_| open_unit(rng.next_u64())))
    }

    pub fn uniform(&mut self, channel: Channel, key: u64) -> Result<f64> {
        Ok(self.uniforms::<1>(channel, key)?[0])
    }

    /// One uniform followed by `N` standard normals from the same keyed stream.
    pub fn uniform_and_normals<const N: usize>(&mut self, channel: Channel, key: u64) -> Result<(f64, [f64; N])> {
        let mut rng = self.stream(channel, key, 1 + N as u64)?;
        let u = open_unit(rng.next_u64());
        let z = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
        Ok((u, z))
    }

    pub fn normals<const N: usize>(&mut self, channel: Channel, key: u64) -> Result<[f64; N]> {
        let mut rng = self.stream(channel, key, N as u64)?;
        Ok(std::array::from_fn(|_| StandardNormal.sample(&mut rng)))
    }
}

#[inline]
fn open_unit(bits: u64) -> f64 {
    ((bits >> 12) as f64 + 0.5) * (1.0 / (1u64 << 52) as f64)
}

/// SplitMix64 finaliser.
#[inline]
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a base seed and a path of indices.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p.wrapping_add(0xD1B5_4A32_D192_ED03))))
}
