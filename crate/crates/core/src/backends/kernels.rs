//! Built-in kernels: the resident code a device runs on each job payload.
//!
//! Every kernel has a sequential reference (`run`) and a sharded form
//! (`shard` / `partial` / `combine`) used by the multicore pool and by
//! cluster ranks. The sharded form reproduces `run` byte for byte for any
//! number of parts.

use std::ops::Range;
use std::time::Duration;

use itertools::Itertools;

use crate::error::{Result, UpmError};

pub const KERNELSET_V1: &str = "kernelset-v1";
/// Model id of devices that host a coupled application script.
pub const COUPLED_APP: &str = "coupled-app";
/// Elements per vecsum64 chunk.
pub const VECSUM_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kernel {
    Echo,
    VecSum64,
    SortU32,
    WordCount,
    /// Sleeps for the leading little-endian u32 milliseconds, then echoes the
    /// rest. Not part of any kernel set; used to force out-of-order completion.
    DelayEcho,
}

pub const KERNELSET_V1_MEMBERS: &[Kernel] =
    &[Kernel::Echo, Kernel::VecSum64, Kernel::SortU32, Kernel::WordCount];

/// What a `model_id` names.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Model {
    Kernel(Kernel),
    KernelSet(&'static [Kernel]),
    CoupledApp,
}

pub fn resolve_model(model_id: &str) -> Option<Model> {
    if model_id == KERNELSET_V1 {
        return Some(Model::KernelSet(KERNELSET_V1_MEMBERS));
    }
    if model_id == COUPLED_APP {
        return Some(Model::CoupledApp);
    }
    Kernel::from_name(model_id).map(Model::Kernel)
}

/// Kernel names contained in the kernel set `model_id`, if it is one.
pub fn kernel_set_members(model_id: &str) -> Option<&'static [Kernel]> {
    match resolve_model(model_id) {
        Some(Model::KernelSet(members)) => Some(members),
        _ => None,
    }
}

fn bad_length(kernel: Kernel) -> UpmError {
    UpmError::backend(format!("payload length ({})", kernel.name()))
}

fn le_f64s(bytes: &[u8]) -> impl Iterator<Item = f64> + '_ {
    bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()))
}

fn le_u32s(bytes: &[u8]) -> impl Iterator<Item = u32> + '_ {
    bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()))
}

/// Splits `units` into `parts` contiguous ranges of `units / parts`, the
/// remainder going to the last range.
pub fn split_even(units: usize, parts: usize) -> Vec<Range<usize>> {
    let parts = parts.max(1);
    let base = units / parts;
    (0..parts)
        .map(|i| {
            let end = if i + 1 == parts { units } else { (i + 1) * base };
            i * base..end
        })
        .collect()
}

impl Kernel {
    pub fn from_name(name: &str) -> Option<Kernel> {
        Some(match name {
            "echo" => Kernel::Echo,
            "vecsum64" => Kernel::VecSum64,
            "sortu32" => Kernel::SortU32,
            "wordcount" => Kernel::WordCount,
            "delayecho" => Kernel::DelayEcho,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Echo => "echo",
            Kernel::VecSum64 => "vecsum64",
            Kernel::SortU32 => "sortu32",
            Kernel::WordCount => "wordcount",
            Kernel::DelayEcho => "delayecho",
        }
    }

    pub fn is_shardable(self) -> bool {
        !matches!(self, Kernel::DelayEcho)
    }

    /// Sequential reference implementation.
    pub fn run(self, payload: &[u8]) -> Result<Vec<u8>> {
        match self {
            Kernel::Echo => Ok(payload.to_vec()),
            Kernel::VecSum64 => {
                if !payload.len().is_multiple_of(8) {
                    return Err(bad_length(self));
                }
                let mut total = 0.0f64;
                for chunk in payload.chunks(VECSUM_CHUNK * 8) {
                    let mut partial = 0.0f64;
                    for x in le_f64s(chunk) {
                        partial += x;
                    }
                    total += partial;
                }
                Ok(total.to_le_bytes().to_vec())
            }
            Kernel::SortU32 => {
                if !payload.len().is_multiple_of(4) {
                    return Err(bad_length(self));
                }
                let mut values: Vec<u32> = le_u32s(payload).collect();
                values.sort_unstable();
                Ok(values.iter().flat_map(|v| v.to_le_bytes()).collect())
            }
            Kernel::WordCount => {
                let text = std::str::from_utf8(payload).map_err(|_| UpmError::backend("utf-8 (wordcount)"))?;
                let count = text.split_whitespace().count() as u64;
                Ok(count.to_le_bytes().to_vec())
            }
            Kernel::DelayEcho => {
                if payload.len() < 4 {
                    return Err(bad_length(self));
                }
                let ms = u32::from_le_bytes(payload[..4].try_into().unwrap());
                std::thread::sleep(Duration::from_millis(ms.into()));
                Ok(payload[4..].to_vec())
            }
        }
    }

    /// Validates the payload and cuts it into `parts` byte ranges (a single
    /// range for kernels that do not shard).
    pub fn shard(self, payload: &[u8], parts: usize) -> Result<Vec<Range<usize>>> {
        let parts = parts.max(1);
        match self {
            Kernel::Echo => Ok(split_even(payload.len(), parts)),
            Kernel::VecSum64 => {
                if !payload.len().is_multiple_of(8) {
                    return Err(bad_length(self));
                }
                let chunk_bytes = VECSUM_CHUNK * 8;
                let chunks = payload.len().div_ceil(chunk_bytes);
                Ok(split_even(chunks, parts)
                    .into_iter()
                    .map(|r| (r.start * chunk_bytes).min(payload.len())..(r.end * chunk_bytes).min(payload.len()))
                    .collect())
            }
            Kernel::SortU32 => {
                if !payload.len().is_multiple_of(4) {
                    return Err(bad_length(self));
                }
                Ok(split_even(payload.len() / 4, parts).into_iter().map(|r| r.start * 4..r.end * 4).collect())
            }
            Kernel::WordCount => {
                let text = std::str::from_utf8(payload).map_err(|_| UpmError::backend("utf-8 (wordcount)"))?;
                let mut cuts: Vec<usize> = split_even(text.len(), parts).iter().map(|r| r.start).collect();
                cuts.push(text.len());
                for i in 1..cuts.len() - 1 {
                    let mut c = cuts[i].max(cuts[i - 1]);
                    while !text.is_char_boundary(c) {
                        c += 1;
                    }
                    cuts[i] = c;
                }
                Ok(cuts.windows(2).map(|w| w[0]..w[1]).collect())
            }
            Kernel::DelayEcho => {
                if payload.len() < 4 {
                    return Err(bad_length(self));
                }
                Ok(vec![0..payload.len()])
            }
        }
    }

    /// Per-shard result in the kernel's partial encoding.
    pub fn partial(self, shard: &[u8]) -> Result<Vec<u8>> {
        match self {
            Kernel::Echo | Kernel::DelayEcho => self.run(shard),
            Kernel::SortU32 => self.run(shard),
            Kernel::VecSum64 => {
                if !shard.len().is_multiple_of(8) {
                    return Err(bad_length(self));
                }
                // One f64 per chunk; the caller folds them in chunk order.
                let mut out = Vec::with_capacity(shard.len().div_ceil(VECSUM_CHUNK * 8) * 8);
                for chunk in shard.chunks(VECSUM_CHUNK * 8) {
                    let mut partial = 0.0f64;
                    for x in le_f64s(chunk) {
                        partial += x;
                    }
                    out.extend_from_slice(&partial.to_le_bytes());
                }
                Ok(out)
            }
            Kernel::WordCount => {
                let text = std::str::from_utf8(shard).map_err(|_| UpmError::backend("utf-8 (wordcount)"))?;
                let count = text.split_whitespace().count() as u64;
                let mut flags = 0u8;
                if let Some(first) = text.chars().next() {
                    flags |= 0b100;
                    if !first.is_whitespace() {
                        flags |= 0b001;
                    }
                }
                if text.chars().next_back().is_some_and(|c| !c.is_whitespace()) {
                    flags |= 0b010;
                }
                let mut out = count.to_le_bytes().to_vec();
                out.push(flags);
                Ok(out)
            }
        }
    }

    /// Combines partials given in shard order.
    pub fn combine(self, partials: Vec<Vec<u8>>) -> Result<Vec<u8>> {
        match self {
            Kernel::Echo => Ok(partials.concat()),
            Kernel::DelayEcho => Ok(partials.into_iter().next().unwrap_or_default()),
            Kernel::VecSum64 => {
                let mut total = 0.0f64;
                for p in &partials {
                    for x in le_f64s(p) {
                        total += x;
                    }
                }
                Ok(total.to_le_bytes().to_vec())
            }
            Kernel::SortU32 => {
                let merged = partials.iter().map(|p| le_u32s(p)).kmerge();
                Ok(merged.flat_map(|v| v.to_le_bytes()).collect())
            }
            Kernel::WordCount => {
                let mut total = 0u64;
                let mut prev_ends_in_word = false;
                for p in &partials {
                    if p.len() != 9 {
                        return Err(UpmError::backend("malformed wordcount partial"));
                    }
                    let flags = p[8];
                    if flags & 0b100 == 0 {
                        continue;
                    }
                    total += u64::from_le_bytes(p[..8].try_into().unwrap());
                    if prev_ends_in_word && flags & 0b001 != 0 {
                        total -= 1;
                    }
                    prev_ends_in_word = flags & 0b010 != 0;
                }
                Ok(total.to_le_bytes().to_vec())
            }
        }
    }

    /// Shards, maps every shard with `map` (which may run them in parallel
    /// or remotely) and combines.
    pub fn run_sharded<F>(self, payload: &[u8], parts: usize, map: F) -> Result<Vec<u8>>
    where
        F: FnOnce(Vec<&[u8]>) -> Vec<Result<Vec<u8>>>,
    {
        if !self.is_shardable() {
            return self.run(payload);
        }
        let shards: Vec<&[u8]> = self.shard(payload, parts)?.into_iter().map(|r| &payload[r]).collect();
        let partials = map(shards).into_iter().collect::<Result<Vec<_>>>()?;
        self.combine(partials)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn f64s(values: &[f64]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn u32s(values: &[u32]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn serial(kernel: Kernel, payload: &[u8], parts: usize) -> Result<Vec<u8>> {
        kernel.run_sharded(payload, parts, |shards| shards.into_iter().map(|s| kernel.partial(s)).collect())
    }

    #[test]
    fn echo_identity() {
        assert_eq!(Kernel::Echo.run(b"").unwrap(), b"");
        assert_eq!(Kernel::Echo.run(b"hi").unwrap(), b"hi");
        let blob: Vec<u8> = (0..65536u32).map(|i| (i.wrapping_mul(2654435761) >> 24) as u8).collect();
        assert_eq!(Kernel::Echo.run(&blob).unwrap(), blob);
    }

    #[test]
    fn vecsum_small_cases() {
        assert_eq!(Kernel::VecSum64.run(&[]).unwrap(), 0.0f64.to_le_bytes());
        assert_eq!(Kernel::VecSum64.run(&f64s(&[1.0, 2.0, 3.0])).unwrap(), 6.0f64.to_le_bytes());
        assert_eq!(
            Kernel::VecSum64.run(&[0u8; 7]).unwrap_err(),
            UpmError::backend("payload length (vecsum64)")
        );
    }

    #[test]
    fn sortu32_and_wordcount_examples() {
        assert_eq!(Kernel::SortU32.run(&u32s(&[3, 1, 2])).unwrap(), u32s(&[1, 2, 3]));
        assert!(Kernel::SortU32.run(&[1, 2, 3]).is_err());
        assert_eq!(Kernel::WordCount.run(b"a  b\nc").unwrap(), 3u64.to_le_bytes());
        assert!(Kernel::WordCount.run(&[0xff, 0xfe]).is_err());
    }

    #[test]
    fn echo_on_four_parts_uses_one_byte_shards() {
        let shards = Kernel::Echo.shard(b"abcd", 4).unwrap();
        assert_eq!(shards, vec![0..1, 1..2, 2..3, 3..4]);
        assert_eq!(serial(Kernel::Echo, b"abcd", 4).unwrap(), b"abcd");
    }

    #[test]
    fn remainder_goes_to_last_shard() {
        assert_eq!(split_even(10, 3), vec![0..3, 3..6, 6..10]);
        assert_eq!(split_even(3, 4), vec![0..0, 0..0, 0..0, 0..3]);
        assert_eq!(split_even(0, 2), vec![0..0, 0..0]);
    }

    #[test]
    fn wordcount_cut_inside_multibyte_char() {
        let text = "ééé ééé\u{2003}x";
        for parts in 1..12 {
            assert_eq!(serial(Kernel::WordCount, text.as_bytes(), parts).unwrap(), 3u64.to_le_bytes(), "{parts}");
        }
    }

    #[test]
    fn delayecho_is_not_sharded() {
        let mut payload = 5u32.to_le_bytes().to_vec();
        payload.extend_from_slice(b"late");
        assert_eq!(serial(Kernel::DelayEcho, &payload, 8).unwrap(), b"late");
        assert!(Kernel::DelayEcho.run(&[1]).is_err());
    }

    #[test]
    fn model_resolution() {
        assert_eq!(resolve_model("echo"), Some(Model::Kernel(Kernel::Echo)));
        assert_eq!(resolve_model(KERNELSET_V1), Some(Model::KernelSet(KERNELSET_V1_MEMBERS)));
        assert_eq!(resolve_model(COUPLED_APP), Some(Model::CoupledApp));
        assert_eq!(resolve_model("x"), None);
        assert!(!KERNELSET_V1_MEMBERS.contains(&Kernel::DelayEcho));
    }

    /// Chunked left-to-right sum written independently of the kernel.
    fn vecsum_oracle(values: &[f64]) -> f64 {
        let mut partials = Vec::new();
        let mut i = 0;
        while i < values.len() {
            let end = (i + VECSUM_CHUNK).min(values.len());
            let mut s = 0.0;
            for v in &values[i..end] {
                s += *v;
            }
            partials.push(s);
            i = end;
        }
        let mut total = 0.0;
        for p in partials {
            total += p;
        }
        total
    }

    #[test]
    fn vecsum_1e5_independent_of_parts() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        let values: Vec<f64> = (0..100_000).map(|_| rng.gen_range(-1e6..1e6)).collect();
        let payload = f64s(&values);
        let expected = vecsum_oracle(&values).to_le_bytes().to_vec();
        assert_eq!(Kernel::VecSum64.run(&payload).unwrap(), expected);
        for parts in [1, 2, 3, 4, 8, 30] {
            assert_eq!(serial(Kernel::VecSum64, &payload, parts).unwrap(), expected);
        }
    }

    #[test]
    fn sortu32_1e5_matches_reference_sort() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        let mut values: Vec<u32> = (0..100_000).map(|_| rng.gen()).collect();
        let payload = u32s(&values);
        values.sort();
        let expected = u32s(&values);
        assert_eq!(Kernel::SortU32.run(&payload).unwrap(), expected);
        assert_eq!(serial(Kernel::SortU32, &payload, 7).unwrap(), expected);
    }

    proptest! {
        #[test]
        fn sharded_equals_sequential(
            kernel in prop_oneof![Just(Kernel::Echo), Just(Kernel::SortU32), Just(Kernel::WordCount)],
            bytes in proptest::collection::vec(any::<u8>(), 0..300),
            text in "[a-z \\t\\né\u{3000}]{0,120}",
            parts in 1usize..10,
        ) {
            let payload = match kernel {
                Kernel::WordCount => text.into_bytes(),
                Kernel::SortU32 => bytes[..bytes.len() / 4 * 4].to_vec(),
                _ => bytes,
            };
            prop_assert_eq!(serial(kernel, &payload, parts).unwrap(), kernel.run(&payload).unwrap());
        }

        #[test]
        fn vecsum_sharded_equals_sequential(
            values in proptest::collection::vec(-1e9f64..1e9, 0..20_000),
            parts in 1usize..9,
        ) {
            let payload = f64s(&values);
            prop_assert_eq!(serial(Kernel::VecSum64, &payload, parts).unwrap(), Kernel::VecSum64.run(&payload).unwrap());
        }
    }
}
