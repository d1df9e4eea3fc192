//! Synthetic piecewise-constant symbol streams, their binary container and
//! grouped batch iteration.
//!
//! A sequence is a run of segments. Each segment holds one symbol for a
//! whole number of frames, and every frame emits that symbol's waveform
//! template of `samples_per_frame` samples. Channels apply their own gain,
//! offset and short coloring filter on top, so labels are channel-invariant.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"ACPCDS01";
const DATASET_HEADER_BYTES: usize = 8 + 4;
const SEQUENCE_HEADER_BYTES: usize = 4 + 4 + 2 + 2;

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub alphabet: usize,
    /// Segment durations are uniform over `min_duration..=max_duration` frames.
    pub min_duration: usize,
    pub max_duration: usize,
    pub samples_per_frame: usize,
    pub noise_std: f64,
    pub channels: usize,
    /// Samples per sequence.
    pub length: usize,
    pub sequences_per_channel: usize,
    /// Dimension of the symbol embedding that is projected onto the template.
    pub embedding_dim: usize,
    pub template_scale: f64,
    pub gain_spread: f64,
    pub offset_spread: f64,
    pub filter_spread: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            alphabet: 12,
            min_duration: 4,
            max_duration: 12,
            samples_per_frame: 8,
            noise_std: 0.3,
            channels: 4,
            length: 1024,
            sequences_per_channel: 200,
            embedding_dim: 4,
            template_scale: 0.3,
            gain_spread: 0.3,
            offset_spread: 0.3,
            filter_spread: 0.4,
        }
    }
}

impl SyntheticSpec {
    pub fn frames(&self) -> usize {
        self.length / self.samples_per_frame
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Invalid(msg.to_string()));
        if self.alphabet == 0 || self.alphabet > u16::MAX as usize + 1 {
            return bad("alphabet size must be in 1..=65536");
        }
        if self.alphabet == 1 && self.noise_std != 0.0 {
            return bad("a single-symbol alphabet is only allowed without noise");
        }
        if self.min_duration == 0 || self.max_duration < self.min_duration {
            return bad("durations must satisfy 1 <= min <= max");
        }
        if self.samples_per_frame == 0 || !self.length.is_multiple_of(self.samples_per_frame) {
            return bad("length must be a positive multiple of samples_per_frame");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and non-negative");
        }
        if self.channels == 0 || self.channels > u16::MAX as usize + 1 {
            return bad("channel count must be in 1..=65536");
        }
        if self.sequences_per_channel == 0 || self.embedding_dim == 0 {
            return bad("sequences_per_channel and embedding_dim must be positive");
        }
        for (name, v) in [
            ("template_scale", self.template_scale),
            ("gain_spread", self.gain_spread),
            ("offset_spread", self.offset_spread),
            ("filter_spread", self.filter_spread),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Invalid(format!("{name} must be finite and non-negative")));
            }
        }
        if self.gain_spread >= 1.0 {
            return bad("gain_spread must be below 1 so gains stay positive");
        }
        if !feasible_lengths(self.min_duration, self.max_duration, self.frames())[self.frames()] {
            return Err(Error::Invalid(format!(
                "{} frames cannot be tiled by segments of {}..={} frames",
                self.frames(),
                self.min_duration,
                self.max_duration
            )));
        }
        Ok(())
    }
}

/// `out[r]` is true when `r` frames can be split into segments of allowed durations.
fn feasible_lengths(min: usize, max: usize, total: usize) -> Vec<bool> {
    let mut ok = vec![false; total + 1];
    ok[0] = true;
    for r in 1..=total {
        ok[r] = (min..=max.min(r)).any(|d| ok[r - d]);
    }
    ok
}

/// A maximal run of one symbol.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub symbol: u16,
}

/// One synthetic utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSequence {
    pub samples: Vec<f32>,
    /// One label per frame of `samples.len() / frame_labels.len()` samples.
    pub frame_labels: Vec<u16>,
    pub channel: u16,
}

impl RawSequence {
    pub fn samples_per_frame(&self) -> usize {
        if self.frame_labels.is_empty() {
            0
        } else {
            self.samples.len() / self.frame_labels.len()
        }
    }

    /// Label runs. Consecutive generated segments never repeat a symbol, so
    /// these are exactly the generated segments.
    pub fn segments(&self) -> Vec<Segment> {
        let mut out: Vec<Segment> = Vec::new();
        for (i, &s) in self.frame_labels.iter().enumerate() {
            match out.last_mut() {
                Some(seg) if seg.symbol == s => seg.len += 1,
                _ => out.push(Segment { start: i, len: 1, symbol: s }),
            }
        }
        out
    }

    /// Frame indices where the label changes.
    pub fn boundaries(&self) -> Vec<usize> {
        self.segments().iter().skip(1).map(|s| s.start).collect()
    }

    fn payload_bytes(&self) -> usize {
        SEQUENCE_HEADER_BYTES + 4 * self.samples.len() + 2 * self.frame_labels.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<RawSequence>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn channels(&self) -> Vec<u16> {
        let mut c: Vec<u16> = self.sequences.iter().map(|s| s.channel).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Size of the serialized container in bytes.
    pub fn encoded_len(&self) -> usize {
        DATASET_HEADER_BYTES + self.sequences.iter().map(RawSequence::payload_bytes).sum::<usize>()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&u32_len(self.sequences.len(), "sequence count")?.to_le_bytes());
        for s in &self.sequences {
            out.extend_from_slice(&u32_len(s.samples.len(), "sample count")?.to_le_bytes());
            out.extend_from_slice(&u32_len(s.frame_labels.len(), "label count")?.to_le_bytes());
            out.extend_from_slice(&s.channel.to_le_bytes());
            out.extend_from_slice(&0u16.to_le_bytes());
            for v in &s.samples {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for l in &s.frame_labels {
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(DATASET_MAGIC)?;
        let count = r.u32()? as usize;
        let mut sequences = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let t = r.u32()? as usize;
            let labels = r.u32()? as usize;
            let channel = r.u16()?;
            let reserved = r.u16()?;
            if reserved != 0 {
                return Err(Error::Invalid(format!("sequence {i}: reserved field is {reserved}")));
            }
            let samples = r.take(4 * t)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let frame_labels = r.take(2 * labels)?.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
            sequences.push(RawSequence { samples, frame_labels, channel });
        }
        if r.remaining() != 0 {
            return Err(Error::Invalid(format!("{} trailing bytes after dataset", r.remaining())));
        }
        Ok(Self { sequences })
    }
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Invalid(format!("{what} {n} does not fit in u32")))
}

/// Little-endian cursor shared by the binary formats of this crate.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated(format!("need {n} bytes at offset {}, {} left", self.pos, self.remaining())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    /// Checks an 8-byte magic. A matching 6-byte stem with a different
    /// 2-digit suffix is reported as a version mismatch.
    pub(crate) fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        let found = self.take(8).map_err(|_| Error::Truncated("file shorter than its magic".into()))?;
        if found == expected {
            return Ok(());
        }
        let digits = |b: &[u8]| std::str::from_utf8(b).ok().and_then(|s| s.parse::<u32>().ok());
        if found[..6] == expected[..6] {
            if let (Some(e), Some(f)) = (digits(&expected[6..]), digits(&found[6..])) {
                return Err(Error::Version { expected: e, found: f });
            }
        }
        Err(Error::BadMagic {
            expected: String::from_utf8_lossy(expected).into_owned(),
            found: String::from_utf8_lossy(found).into_owned(),
        })
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, dataset.to_bytes()?)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::from_bytes(&fs::read(path)?)
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Per-channel distortion: `y[i] = h0 v[i] + h1 v[i-1] + h2 v[i-2]` with
/// `v = gain * x + offset`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelDistortion {
    pub gain: f64,
    pub offset: f64,
    pub filter: [f64; 3],
}

impl ChannelDistortion {
    fn draw(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut sym = |spread: f64| if spread > 0.0 { rng.gen_range(-spread..=spread) } else { 0.0 };
        let gain = 1.0 + sym(spec.gain_spread);
        let offset = sym(spec.offset_spread);
        let filter = [1.0, sym(spec.filter_spread), sym(spec.filter_spread) / 2.0];
        Self { gain, offset, filter }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let v: Vec<f64> = x.iter().map(|s| self.gain * s + self.offset).collect();
        (0..v.len())
            .map(|i| {
                let mut y = self.filter[0] * v[i];
                if i >= 1 {
                    y += self.filter[1] * v[i - 1];
                }
                if i >= 2 {
                    y += self.filter[2] * v[i - 2];
                }
                y
            })
            .collect()
    }
}

/// Everything drawn once per corpus before any sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub spec: SyntheticSpec,
    /// `alphabet` rows of `samples_per_frame` samples.
    pub templates: Vec<Vec<f64>>,
    pub channels: Vec<ChannelDistortion>,
}

impl Generator {
    pub fn new(spec: SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let (e, r) = (spec.embedding_dim, spec.samples_per_frame);
        let projection: Vec<f64> = (0..r * e).map(|_| standard_normal(rng) / (e as f64).sqrt()).collect();
        let templates = (0..spec.alphabet)
            .map(|_| {
                let emb: Vec<f64> = (0..e).map(|_| standard_normal(rng)).collect();
                (0..r)
                    .map(|i| spec.template_scale * (0..e).map(|j| projection[i * e + j] * emb[j]).sum::<f64>())
                    .collect()
            })
            .collect();
        let channels = (0..spec.channels).map(|_| ChannelDistortion::draw(&spec, rng)).collect();
        Ok(Self { spec, templates, channels })
    }

    /// Draws a segmentation of `frames` frames. Durations are uniform over
    /// the allowed range restricted to values that leave a tileable remainder,
    /// which is the full range whenever at least `min + max` frames remain.
    pub fn draw_segments(&self, rng: &mut ChaCha8Rng) -> Vec<Segment> {
        let s = &self.spec;
        let total = s.frames();
        let ok = feasible_lengths(s.min_duration, s.max_duration, total);
        let mut out: Vec<Segment> = Vec::new();
        let mut start = 0;
        while start < total {
            let left = total - start;
            let options: Vec<usize> = (s.min_duration..=s.max_duration.min(left)).filter(|&d| ok[left - d]).collect();
            let len = options[rng.gen_range(0..options.len())];
            let symbol = match out.last() {
                Some(prev) if s.alphabet > 1 => {
                    // uniform over the other symbols
                    let v = rng.gen_range(0..s.alphabet - 1) as u16;
                    if v >= prev.symbol {
                        v + 1
                    } else {
                        v
                    }
                }
                _ => rng.gen_range(0..s.alphabet) as u16,
            };
            out.push(Segment { start, len, symbol });
            start += len;
        }
        out
    }

    /// Clean waveform of a segmentation, before channel distortion.
    pub fn render(&self, segments: &[Segment]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.spec.length);
        for seg in segments {
            for _ in 0..seg.len {
                x.extend_from_slice(&self.templates[seg.symbol as usize]);
            }
        }
        x
    }

    pub fn sequence(&self, channel: usize, rng: &mut ChaCha8Rng) -> RawSequence {
        let segments = self.draw_segments(rng);
        let mut x = self.render(&segments);
        if self.spec.noise_std > 0.0 {
            for v in &mut x {
                *v += self.spec.noise_std * standard_normal(rng);
            }
        }
        let y = self.channels[channel].apply(&x);
        let mut frame_labels = Vec::with_capacity(self.spec.frames());
        for seg in &segments {
            frame_labels.extend(std::iter::repeat_n(seg.symbol, seg.len));
        }
        RawSequence { samples: y.iter().map(|&v| v as f32).collect(), frame_labels, channel: channel as u16 }
    }
}

/// Generates a corpus ordered by channel, then by index within the channel.
pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen = Generator::new(spec.clone(), &mut rng)?;
    let mut sequences = Vec::with_capacity(spec.channels * spec.sequences_per_channel);
    for c in 0..spec.channels {
        for _ in 0..spec.sequences_per_channel {
            sequences.push(gen.sequence(c, &mut rng));
        }
    }
    Ok(Dataset { sequences })
}

/// A minibatch: dataset indices from one channel, split into negative-sampling groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub channel: u16,
    pub indices: Vec<usize>,
    /// Group of each slot of `indices`.
    pub groups: Vec<usize>,
}

/// Group of slot `i` in a batch of `b` split into `g` contiguous groups.
pub fn group_of(i: usize, b: usize, g: usize) -> usize {
    i * g / b
}

/// One epoch of batches. Each channel's sequences are shuffled and chunked
/// into full batches (a remainder smaller than `b` is dropped), then the
/// batches of all channels are shuffled together. The order depends only on
/// `(seed, epoch)`.
pub fn batches(dataset: &Dataset, b: usize, g: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    if b == 0 || g == 0 || g > b {
        return Err(Error::Invalid(format!("need 1 <= groups <= batch size, got B={b}, G={g}")));
    }
    let smallest = (0..b).fold(vec![0usize; g], |mut acc, i| {
        acc[group_of(i, b, g)] += 1;
        acc
    });
    if smallest.iter().any(|&n| n < 2) {
        return Err(Error::Insufficient(format!(
            "B={b} split into G={g} groups leaves a group with one sequence, so it has no negatives"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut out = Vec::new();
    for channel in dataset.channels() {
        let mut idx: Vec<usize> =
            dataset.sequences.iter().enumerate().filter(|(_, s)| s.channel == channel).map(|(i, _)| i).collect();
        if idx.len() < b {
            return Err(Error::Insufficient(format!(
                "channel {channel} has {} sequences, fewer than the batch size {b}",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        for chunk in idx.chunks_exact(b) {
            out.push(Batch { channel, indices: chunk.to_vec(), groups: (0..b).map(|i| group_of(i, b, g)).collect() });
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn small() -> SyntheticSpec {
        SyntheticSpec { channels: 2, sequences_per_channel: 5, length: 256, ..SyntheticSpec::default() }
    }

    fn clean(spec: SyntheticSpec) -> SyntheticSpec {
        SyntheticSpec { noise_std: 0.0, gain_spread: 0.0, offset_spread: 0.0, filter_spread: 0.0, ..spec }
    }

    #[test]
    fn single_symbol_without_noise_is_constant() {
        let spec = clean(SyntheticSpec { alphabet: 1, ..small() });
        let d = generate(&spec, 3).unwrap();
        for s in &d.sequences {
            assert!(s.frame_labels.iter().all(|&l| l == 0));
            let r = spec.samples_per_frame;
            for f in s.samples.chunks(r) {
                assert_eq!(f, &s.samples[..r]);
            }
        }
        assert!(SyntheticSpec { alphabet: 1, ..small() }.validate().is_err());
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate(&small(), 11).unwrap().to_bytes().unwrap();
        let b = generate(&small(), 11).unwrap().to_bytes().unwrap();
        let c = generate(&small(), 12).unwrap().to_bytes().unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn segments_respect_duration_bounds_and_alternate() {
        let spec = small();
        let d = generate(&spec, 5).unwrap();
        for s in &d.sequences {
            assert_eq!(s.samples.len(), spec.length);
            assert_eq!(s.frame_labels.len(), spec.frames());
            let segs = s.segments();
            assert_eq!(segs.iter().map(|g| g.len).sum::<usize>(), spec.frames());
            for w in segs.windows(2) {
                assert_ne!(w[0].symbol, w[1].symbol);
            }
            assert!(segs.iter().all(|g| (spec.min_duration..=spec.max_duration).contains(&g.len)));
            assert!(s.frame_labels.iter().all(|&l| (l as usize) < spec.alphabet));
        }
    }

    #[test]
    fn duration_histogram_is_uniform() {
        let spec = SyntheticSpec { length: 8 * 400, ..small() };
        let gen = Generator::new(spec.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (lo, hi) = (spec.min_duration, spec.max_duration);
        let mut counts = vec![0usize; hi - lo + 1];
        let mut n = 0;
        while n < 10_000 {
            for seg in gen.draw_segments(&mut rng) {
                // durations near the end are restricted to keep the tiling exact
                if spec.frames() - seg.start >= lo + hi && n < 10_000 {
                    counts[seg.len - lo] += 1;
                    n += 1;
                }
            }
        }
        let expect = n as f64 / counts.len() as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        let p = 1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2={chi2} p={p} counts={counts:?}");
    }

    #[test]
    fn untileable_length_is_rejected() {
        let spec = SyntheticSpec { min_duration: 4, max_duration: 5, length: 8 * 6, ..small() };
        assert!(matches!(spec.validate(), Err(Error::Invalid(_))));
        let ok = feasible_lengths(4, 5, 13);
        let expect: Vec<usize> = vec![0, 4, 5, 8, 9, 10, 12, 13];
        assert_eq!((0..=13).filter(|&r| ok[r]).collect::<Vec<_>>(), expect);
    }

    #[test]
    fn noiseless_emission_decodes_to_labels() {
        let spec = clean(small());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gen = Generator::new(spec.clone(), &mut rng).unwrap();
        for _ in 0..5 {
            let s = gen.sequence(1, &mut rng);
            for (f, frame) in s.samples.chunks(spec.samples_per_frame).enumerate() {
                let nearest = (0..spec.alphabet)
                    .min_by(|&a, &b| {
                        let d = |t: &Vec<f64>| frame.iter().zip(t).map(|(x, y)| (*x as f64 - y).powi(2)).sum::<f64>();
                        d(&gen.templates[a]).total_cmp(&d(&gen.templates[b]))
                    })
                    .unwrap();
                assert_eq!(nearest as u16, s.frame_labels[f]);
            }
        }
    }

    #[test]
    fn channel_filter_matches_direct_form() {
        let ch = ChannelDistortion { gain: 2.0, offset: 1.0, filter: [1.0, 0.5, -0.25] };
        let y = ch.apply(&[1.0, 0.0, -1.0]);
        // v = [3, 1, -1]
        assert_eq!(y, vec![3.0, 1.0 + 1.5, -1.0 + 0.5 - 0.75]);
    }

    #[test]
    fn round_trip_and_size() {
        let d = generate(&small(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        write_dataset(&d, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        // header + per sequence (12-byte header, 4 bytes per sample, 2 per label)
        assert_eq!(bytes.len(), 12 + 10 * (12 + 4 * 256 + 2 * 32));
        assert_eq!(bytes.len(), d.encoded_len());
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let bytes = generate(&small(), 4).unwrap().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::BadMagic { .. })));
        let mut v2 = bytes.clone();
        v2[..8].copy_from_slice(b"ACPCDS02");
        assert!(matches!(Dataset::from_bytes(&v2), Err(Error::Version { expected: 1, found: 2 })));
        assert!(matches!(Dataset::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
        assert!(matches!(Dataset::from_bytes(&bytes[..5]), Err(Error::Truncated(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(Dataset::from_bytes(&extra).is_err());
    }

    #[test]
    fn batches_are_single_channel_and_grouped() {
        let d = generate(&SyntheticSpec { sequences_per_channel: 9, ..small() }, 1).unwrap();
        let bs = batches(&d, 4, 2, 7, 0).unwrap();
        assert_eq!(bs.len(), 2 * 2);
        let mut seen = std::collections::HashSet::new();
        for b in &bs {
            assert!(b.indices.iter().all(|&i| d.sequences[i].channel == b.channel));
            assert_eq!(b.groups, vec![0, 0, 1, 1]);
            assert!(b.indices.iter().all(|&i| seen.insert(i)));
        }
        assert_eq!(bs, batches(&d, 4, 2, 7, 0).unwrap());
        assert_ne!(bs, batches(&d, 4, 2, 7, 1).unwrap());
        assert_eq!(batches(&d, 4, 1, 7, 0).unwrap()[0].groups, vec![0; 4]);
    }

    #[test]
    fn degenerate_batching_errors() {
        let d = generate(&small(), 1).unwrap();
        assert!(matches!(batches(&d, 4, 4, 0, 0), Err(Error::Insufficient(_))));
        assert!(matches!(batches(&d, 6, 1, 0, 0), Err(Error::Insufficient(_))));
        assert!(batches(&d, 4, 5, 0, 0).is_err());
        assert!(batches(&d, 0, 1, 0, 0).is_err());
    }
}
