//! Noise-mask algebra: the alpha schedule, mask-driven corruption and
//! re-noising, training-mask sampling, inference-schedule construction,
//! and guidance composition.
//!
//! A mask assigns every (agent, chunked-step) position a noise level.
//! Level 0 means observed/clean (alpha exactly 1, so corruption is the
//! identity there); levels 1..K interpolate alpha linearly from 0.99 down
//! to 0.01; the guidance level carries a fixed alpha of 0.8.

use crate::rng::Stream;

pub const DEFAULT_K: usize = 5;
pub const GUIDANCE_ALPHA: f64 = 0.8;

/// A noise level: a discrete index in 0..=K or the continuous guidance value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Level {
    Index(u8),
    Guidance,
}

impl Level {
    pub const CLEAN: Level = Level::Index(0);

    /// Single-character code used in schedule dumps: digits or 'G'.
    pub fn code(&self) -> char {
        match self {
            Level::Index(i) => char::from_digit(*i as u32, 36).unwrap(),
            Level::Guidance => 'G',
        }
    }

    pub fn from_code(c: char) -> Option<Level> {
        if c == 'G' {
            Some(Level::Guidance)
        } else {
            c.to_digit(36).map(|d| Level::Index(d as u8))
        }
    }
}

/// Maps noise levels to signal-retention coefficients.
#[derive(Debug, Clone)]
pub struct AlphaSchedule {
    pub k: usize,
    alphas: Vec<f64>,
}

impl AlphaSchedule {
    /// Linear schedule: alpha(0) = 1 exactly, alpha(1..=K) linearly spaced
    /// from 0.99 down to 0.01 (a single training level gets 0.01).
    pub fn linear(k: usize) -> Self {
        assert!(k >= 1, "alpha schedule needs at least one level");
        let mut alphas = Vec::with_capacity(k + 1);
        alphas.push(1.0);
        for l in 1..=k {
            let a = if k == 1 {
                0.01
            } else {
                0.99 - (0.99 - 0.01) * (l - 1) as f64 / (k - 1) as f64
            };
            alphas.push(a);
        }
        for w in alphas.windows(2) {
            assert!(w[0] > w[1], "alpha schedule must be strictly decreasing");
        }
        AlphaSchedule { k, alphas }
    }

    pub fn alpha(&self, level: Level) -> f64 {
        match level {
            Level::Index(i) => {
                assert!(
                    (i as usize) < self.alphas.len(),
                    "level {i} out of range for K = {}",
                    self.k
                );
                self.alphas[i as usize]
            }
            Level::Guidance => GUIDANCE_ALPHA,
        }
    }

    /// The maximum discrete level.
    pub fn max_level(&self) -> Level {
        Level::Index(self.k as u8)
    }
}

/// Per-agent, per-chunked-step noise levels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoiseMask {
    pub n_agents: usize,
    pub steps: usize,
    pub levels: Vec<Level>,
}

impl NoiseMask {
    pub fn uniform(n_agents: usize, steps: usize, level: Level) -> Self {
        NoiseMask {
            n_agents,
            steps,
            levels: vec![level; n_agents * steps],
        }
    }

    pub fn get(&self, agent: usize, step: usize) -> Level {
        self.levels[agent * self.steps + step]
    }

    pub fn set(&mut self, agent: usize, step: usize, level: Level) {
        self.levels[agent * self.steps + step] = level;
    }

    pub fn is_all(&self, level: Level) -> bool {
        self.levels.iter().all(|&l| l == level)
    }

    /// One text row per agent, level codes separated by spaces.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for a in 0..self.n_agents {
            let row: Vec<String> = (0..self.steps)
                .map(|t| self.get(a, t).code().to_string())
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Forward corruption: z = sqrt(alpha) * x + sqrt(1 - alpha) * eps with
/// eps ~ N(0, I), elementwise with the level resolved per (agent, step).
/// Values laid out (agent, step, channel); the mask broadcasts across
/// channels. Level-0 positions come back bitwise equal to x.
pub fn apply_noise(
    x: &[f64],
    channels: usize,
    mask: &NoiseMask,
    sched: &AlphaSchedule,
    rng: &mut Stream,
) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(
        x.len(),
        mask.n_agents * mask.steps * channels,
        "apply_noise value/mask shape mismatch"
    );
    assert!(x.iter().all(|v| v.is_finite()), "non-finite input value");
    let mut z = vec![0.0; x.len()];
    let mut eps = vec![0.0; x.len()];
    for (i, zi) in z.iter_mut().enumerate() {
        let pos = i / channels;
        let level = mask.levels[pos];
        let a = sched.alpha(level);
        let e = rng.next_normal();
        eps[i] = e;
        *zi = a.sqrt() * x[i] + (1.0 - a).sqrt() * e;
    }
    (z, eps)
}

/// Re-noise a clean estimate to the next mask's levels. Identical formula
/// to [`apply_noise`]; an all-zero mask returns the input bitwise.
pub fn renoise(
    x_hat: &[f64],
    channels: usize,
    m_next: &NoiseMask,
    sched: &AlphaSchedule,
    rng: &mut Stream,
) -> Vec<f64> {
    apply_noise(x_hat, channels, m_next, sched, rng).0
}

/// Masking axis drawn per training sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAxis {
    Temporal,
    Agent,
}

/// Sample one training mask.
///
/// Temporal: the last ceil(delta * T_a) steps of every agent get level K;
/// earlier steps get random levels in 1..=K sorted non-decreasing in time.
/// Agent: ceil(delta * N) agents (chosen uniformly) get level K at all
/// steps; each remaining agent gets one uniform level in 1..=K-1 at all
/// its steps. With K = 1 no level sits strictly between clean and fully
/// noised, so both branches degenerate to binary {0, K} masks.
pub fn sample_training_mask(
    n_agents: usize,
    steps: usize,
    delta: f64,
    axis: MaskAxis,
    k: usize,
    rng: &mut Stream,
) -> NoiseMask {
    assert!((0.0..=1.0).contains(&delta), "delta must lie in [0, 1]");
    let top = Level::Index(k as u8);
    let mut mask = NoiseMask::uniform(n_agents, steps, Level::CLEAN);
    match axis {
        MaskAxis::Temporal => {
            let n_masked = ((delta * steps as f64).ceil() as usize).min(steps);
            let free = steps - n_masked;
            for a in 0..n_agents {
                let mut lv: Vec<u8> = (0..free)
                    .map(|_| {
                        if k == 1 {
                            0
                        } else {
                            (1 + rng.next_index(k)) as u8
                        }
                    })
                    .collect();
                lv.sort_unstable();
                for (t, &l) in lv.iter().enumerate() {
                    mask.set(a, t, Level::Index(l));
                }
                for t in free..steps {
                    mask.set(a, t, top);
                }
            }
        }
        MaskAxis::Agent => {
            let n_masked = ((delta * n_agents as f64).ceil() as usize).min(n_agents);
            let chosen = rng.sample_distinct(n_agents, n_masked);
            let mut is_masked = vec![false; n_agents];
            for &a in &chosen {
                is_masked[a] = true;
            }
            for a in 0..n_agents {
                let level = if is_masked[a] {
                    top
                } else if k >= 2 {
                    Level::Index((1 + rng.next_index(k - 1)) as u8)
                } else {
                    Level::CLEAN
                };
                for t in 0..steps {
                    mask.set(a, t, level);
                }
            }
        }
    }
    mask
}

/// Deterministic masking-rate grid for a batch: evenly spaced over [0, 1],
/// degenerate batch of one gets 0.5.
pub fn batch_mask_rates(batch: usize) -> Vec<f64> {
    assert!(batch >= 1, "batch size must be at least 1");
    if batch == 1 {
        return vec![0.5];
    }
    (0..batch)
        .map(|i| i as f64 / (batch - 1) as f64)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleMode {
    OneStep,
    Temporal,
    Agent,
    Custom,
}

impl ScheduleMode {
    pub fn tag(&self) -> &'static str {
        match self {
            ScheduleMode::OneStep => "one_step",
            ScheduleMode::Temporal => "temporal",
            ScheduleMode::Agent => "agent",
            ScheduleMode::Custom => "custom",
        }
    }

    pub fn from_tag(s: &str) -> Option<ScheduleMode> {
        match s {
            "one_step" => Some(ScheduleMode::OneStep),
            "temporal" => Some(ScheduleMode::Temporal),
            "agent" => Some(ScheduleMode::Agent),
            "custom" => Some(ScheduleMode::Custom),
            _ => None,
        }
    }
}

/// An ordered list of masks [m_L, ..., m_1, m_0] driving a denoising run.
#[derive(Debug, Clone)]
pub struct InferenceSchedule {
    pub mode: ScheduleMode,
    /// masks[0] = m_L (first denoiser input), last = m_0 (all zeros).
    pub masks: Vec<NoiseMask>,
    pub guidance: Option<NoiseMask>,
}

impl InferenceSchedule {
    /// Number of denoiser calls (L).
    pub fn denoise_steps(&self) -> usize {
        self.masks.len() - 1
    }

    /// Plain-text grid dump: one block per schedule position.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let l = self.denoise_steps();
        for (i, m) in self.masks.iter().enumerate() {
            out.push_str(&format!("step {}\n", l - i));
            out.push_str(&m.dump());
        }
        out
    }

    /// Per-position monotone non-increase in alpha-order noise plus
    /// all-zero termination. Guidance entries are exempt (they are
    /// composed in at re-noise time, not stored in the base schedule).
    pub fn check_invariants(&self, sched: &AlphaSchedule) {
        let last = self.masks.last().expect("schedule has no masks");
        assert!(last.is_all(Level::CLEAN), "schedule must end all-zero");
        for w in self.masks.windows(2) {
            for (prev, next) in w[0].levels.iter().zip(&w[1].levels) {
                let a_prev = sched.alpha(*prev);
                let a_next = sched.alpha(*next);
                assert!(
                    a_next >= a_prev,
                    "noise must not increase along the schedule"
                );
            }
        }
    }
}

/// Split `extent` positions into `l` contiguous blocks with near-equal
/// sizes; returns block boundaries (block j covers [b[j], b[j+1])).
fn block_bounds(extent: usize, l: usize) -> Vec<usize> {
    (0..=l).map(|j| j * extent / l).collect()
}

/// Build a denoising schedule.
///
/// One-step: [all-K, all-0]. Temporal: positions are grouped into L
/// contiguous time blocks; at schedule position l (counting down from L-1
/// after the initial all-K mask), traversed blocks are clean and the
/// block at absolute index B (1-based) holds its fixed intermediate level
/// clamp(B + K - L, 1, K) until traversed. Agent mode transposes the same
/// construction onto the agent axis in index order.
pub fn build_schedule(
    mode: ScheduleMode,
    l: usize,
    n_agents: usize,
    steps: usize,
    k: usize,
) -> InferenceSchedule {
    assert!(l >= 1, "schedule needs at least one step");
    let top = Level::Index(k as u8);
    let all_k = NoiseMask::uniform(n_agents, steps, top);
    let all_0 = NoiseMask::uniform(n_agents, steps, Level::CLEAN);
    let masks = match mode {
        ScheduleMode::OneStep => vec![all_k, all_0],
        ScheduleMode::Temporal | ScheduleMode::Agent => {
            let extent = match mode {
                ScheduleMode::Temporal => steps,
                _ => n_agents,
            };
            let bounds = block_bounds(extent, l);
            let mut masks = vec![all_k];
            // Positions l = L-1 down to 1; position 0 is the all-zero mask.
            for pos in (1..l).rev() {
                let traversed = l - pos;
                let mut m = NoiseMask::uniform(n_agents, steps, Level::CLEAN);
                for b in 0..l {
                    let level = if b < traversed {
                        Level::CLEAN
                    } else {
                        let intermediate = (b + 1 + k).saturating_sub(l).clamp(1, k);
                        Level::Index(intermediate as u8)
                    };
                    for u in bounds[b]..bounds[b + 1] {
                        match mode {
                            ScheduleMode::Temporal => {
                                for a in 0..n_agents {
                                    m.set(a, u, level);
                                }
                            }
                            _ => {
                                for t in 0..steps {
                                    m.set(u, t, level);
                                }
                            }
                        }
                    }
                }
                masks.push(m);
            }
            masks.push(all_0);
            masks
        }
        ScheduleMode::Custom => panic!("custom schedules are built by the caller"),
    };
    InferenceSchedule {
        mode,
        masks,
        guidance: None,
    }
}

/// Elementwise noise-maximum of a schedule mask with a guidance mask:
/// the entry with the smaller alpha (more noise) wins; ties keep the
/// schedule entry.
pub fn compose_guidance(m: &NoiseMask, g: &NoiseMask, sched: &AlphaSchedule) -> NoiseMask {
    assert_eq!(m.n_agents, g.n_agents, "guidance mask shape mismatch");
    assert_eq!(m.steps, g.steps, "guidance mask shape mismatch");
    let mut out = m.clone();
    for (o, (&ml, &gl)) in out.levels.iter_mut().zip(m.levels.iter().zip(&g.levels)) {
        if sched.alpha(gl) < sched.alpha(ml) {
            *o = gl;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;

    #[test]
    fn alpha_schedule_endpoints_and_interior() {
        let s = AlphaSchedule::linear(5);
        assert_eq!(s.alpha(Level::Index(0)), 1.0);
        assert!((s.alpha(Level::Index(1)) - 0.99).abs() < 1e-15);
        assert!((s.alpha(Level::Index(2)) - 0.745).abs() < 1e-12);
        assert!((s.alpha(Level::Index(3)) - 0.50).abs() < 1e-12);
        assert!((s.alpha(Level::Index(4)) - 0.255).abs() < 1e-12);
        assert!((s.alpha(Level::Index(5)) - 0.01).abs() < 1e-15);
        assert_eq!(s.alpha(Level::Guidance), 0.8);
        // strictly decreasing over indices
        for l in 0..5u8 {
            assert!(s.alpha(Level::Index(l)) > s.alpha(Level::Index(l + 1)));
        }
        let s1 = AlphaSchedule::linear(1);
        assert_eq!(s1.alpha(Level::Index(1)), 0.01);
    }

    #[test]
    fn apply_noise_level_zero_is_identity() {
        let sched = AlphaSchedule::linear(5);
        let mask = NoiseMask::uniform(2, 3, Level::CLEAN);
        let x: Vec<f64> = (0..12).map(|i| i as f64 * 0.25 - 1.0).collect();
        let mut rng = StreamKey::root(1).stream();
        let (z, _) = apply_noise(&x, 2, &mask, &sched, &mut rng);
        for (a, b) in x.iter().zip(&z) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn apply_noise_full_level_scales_signal() {
        // With eps forced to zero, level K leaves sqrt(0.01) = 0.1 signal.
        let sched = AlphaSchedule::linear(5);
        let a = sched.alpha(Level::Index(5));
        let z = a.sqrt() * 1.0 + (1.0 - a).sqrt() * 0.0;
        assert!((z - 0.1).abs() < 1e-12);
    }

    #[test]
    fn apply_noise_moments_via_monte_carlo() {
        // Level 3 of the default schedule has alpha = 0.50.
        let sched = AlphaSchedule::linear(5);
        let mask = NoiseMask::uniform(1, 1, Level::Index(3));
        let x = [2.0];
        let mut rng = StreamKey::root(77).stream();
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let (z, _) = apply_noise(&x, 1, &mask, &sched, &mut rng);
            sum += z[0];
            sumsq += z[0] * z[0];
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let want_mean = 0.5_f64.sqrt() * 2.0;
        assert!((mean - want_mean).abs() < 0.01, "mean {mean} vs {want_mean}");
        assert!((var - 0.5).abs() < 0.01, "var {var}");
    }

    #[test]
    fn renoise_identity_on_all_zero_mask() {
        let sched = AlphaSchedule::linear(5);
        let mask = NoiseMask::uniform(2, 2, Level::CLEAN);
        let x: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect();
        let mut rng = StreamKey::root(3).stream();
        let z = renoise(&x, 2, &mask, &sched, &mut rng);
        for (a, b) in x.iter().zip(&z) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn renoise_mixed_mask_positions_are_independent() {
        let sched = AlphaSchedule::linear(5);
        let mut mask = NoiseMask::uniform(1, 2, Level::CLEAN);
        mask.set(0, 1, Level::Index(5));
        let x = [1.0, 1.0];
        let mut rng = StreamKey::root(4).stream();
        let z = renoise(&x, 1, &mask, &sched, &mut rng);
        assert_eq!(z[0].to_bits(), 1.0_f64.to_bits());
        assert_ne!(z[1], 1.0);
    }

    #[test]
    fn temporal_training_mask_structure() {
        let mut rng = StreamKey::root(9).stream();
        for trial in 0..1000 {
            let m = sample_training_mask(4, 8, 0.5, MaskAxis::Temporal, 5, &mut rng);
            for a in 0..4 {
                // last 4 columns fully masked
                for t in 4..8 {
                    assert_eq!(m.get(a, t), Level::Index(5), "trial {trial}");
                }
                // earlier columns non-decreasing and in 1..=5
                let mut prev = 0u8;
                for t in 0..4 {
                    match m.get(a, t) {
                        Level::Index(l) => {
                            assert!((1..=5).contains(&l));
                            assert!(l >= prev, "levels must be non-decreasing");
                            prev = l;
                        }
                        Level::Guidance => panic!("guidance in training mask"),
                    }
                }
            }
        }
    }

    #[test]
    fn temporal_full_masking_at_delta_one() {
        let mut rng = StreamKey::root(10).stream();
        let m = sample_training_mask(3, 6, 1.0, MaskAxis::Temporal, 5, &mut rng);
        assert!(m.is_all(Level::Index(5)));
    }

    #[test]
    fn agent_mask_constant_rows_at_delta_zero() {
        let mut rng = StreamKey::root(11).stream();
        let m = sample_training_mask(3, 6, 0.0, MaskAxis::Agent, 5, &mut rng);
        for a in 0..3 {
            let first = m.get(a, 0);
            match first {
                Level::Index(l) => assert!((1..=4).contains(&l), "row level {l}"),
                Level::Guidance => panic!("guidance in training mask"),
            }
            for t in 1..6 {
                assert_eq!(m.get(a, t), first, "row must be constant");
            }
        }
    }

    #[test]
    fn agent_mask_branch_counts() {
        let mut rng = StreamKey::root(12).stream();
        let m = sample_training_mask(10, 4, 0.5, MaskAxis::Agent, 5, &mut rng);
        let masked = (0..10)
            .filter(|&a| m.get(a, 0) == Level::Index(5))
            .count();
        assert_eq!(masked, 5);
    }

    #[test]
    fn binary_k1_agent_branch_uses_clean_for_unmasked() {
        let mut rng = StreamKey::root(13).stream();
        let m = sample_training_mask(4, 4, 0.5, MaskAxis::Agent, 1, &mut rng);
        for a in 0..4 {
            let l = m.get(a, 0);
            assert!(l == Level::Index(1) || l == Level::CLEAN);
        }
    }

    #[test]
    fn batch_rate_grids() {
        assert_eq!(batch_mask_rates(5), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(batch_mask_rates(1), vec![0.5]);
        assert_eq!(batch_mask_rates(2), vec![0.0, 1.0]);
    }

    #[test]
    fn one_step_schedule_shape() {
        let s = build_schedule(ScheduleMode::OneStep, 1, 3, 8, 5);
        assert_eq!(s.masks.len(), 2);
        assert!(s.masks[0].is_all(Level::Index(5)));
        assert!(s.masks[1].is_all(Level::CLEAN));
        s.check_invariants(&AlphaSchedule::linear(5));
    }

    #[test]
    fn temporal_five_step_pattern() {
        let s = build_schedule(ScheduleMode::Temporal, 5, 2, 40, 5);
        assert_eq!(s.masks.len(), 6);
        let sched = AlphaSchedule::linear(5);
        s.check_invariants(&sched);
        // mask at position l has its first (5 - l) * 8 columns clean
        for (i, m) in s.masks.iter().enumerate() {
            let l = 5 - i;
            let clean_cols = (5 - l) * 8;
            for t in 0..clean_cols {
                assert_eq!(m.get(0, t), Level::CLEAN, "pos {l} col {t}");
            }
        }
        // the first ramp mask reads [0, 2, 3, 4, 5] over the five blocks
        let m4 = &s.masks[1];
        let want = [0u8, 2, 3, 4, 5];
        for (b, &w) in want.iter().enumerate() {
            for t in b * 8..(b + 1) * 8 {
                assert_eq!(m4.get(1, t), Level::Index(w), "block {b}");
            }
        }
    }

    #[test]
    fn agent_schedule_transposed_blocks() {
        let s = build_schedule(ScheduleMode::Agent, 5, 10, 4, 5);
        assert_eq!(s.masks.len(), 6);
        s.check_invariants(&AlphaSchedule::linear(5));
        // first ramp mask: agents 0..2 clean, then blocks of 2
        let m = &s.masks[1];
        for a in 0..2 {
            for t in 0..4 {
                assert_eq!(m.get(a, t), Level::CLEAN);
            }
        }
        let want = [2u8, 2, 3, 3, 4, 4, 5, 5];
        for (i, &w) in want.iter().enumerate() {
            assert_eq!(m.get(2 + i, 0), Level::Index(w), "agent {}", 2 + i);
        }
    }

    #[test]
    fn schedules_monotone_for_many_step_counts() {
        let sched = AlphaSchedule::linear(5);
        for l in [2usize, 5, 10, 20] {
            build_schedule(ScheduleMode::Temporal, l, 4, 20, 5).check_invariants(&sched);
        }
        for l in [2usize, 5, 10] {
            build_schedule(ScheduleMode::Agent, l, 8, 20, 5).check_invariants(&sched);
        }
    }

    #[test]
    #[should_panic(expected = "at least one step")]
    fn zero_step_schedule_panics() {
        build_schedule(ScheduleMode::Temporal, 0, 2, 8, 5);
    }

    #[test]
    fn guidance_composition_rules() {
        let sched = AlphaSchedule::linear(5);
        let m0 = NoiseMask::uniform(1, 3, Level::CLEAN);
        let g0 = NoiseMask::uniform(1, 3, Level::CLEAN);
        assert_eq!(compose_guidance(&m0, &g0, &sched), m0);

        let g = NoiseMask::uniform(1, 3, Level::Guidance);
        let composed = compose_guidance(&m0, &g, &sched);
        assert!(composed.is_all(Level::Guidance));

        let mk = NoiseMask::uniform(1, 3, Level::Index(5));
        let composed = compose_guidance(&mk, &g, &sched);
        assert!(composed.is_all(Level::Index(5)), "level K outranks guidance");

        let m1 = NoiseMask::uniform(1, 3, Level::Index(1));
        let composed = compose_guidance(&m1, &g, &sched);
        assert!(composed.is_all(Level::Guidance), "guidance outranks level 1");
    }

    #[test]
    fn mask_dump_roundtrip_codes() {
        let mut m = NoiseMask::uniform(2, 3, Level::Index(5));
        m.set(1, 2, Level::Guidance);
        m.set(0, 0, Level::CLEAN);
        let dump = m.dump();
        assert_eq!(dump, "0 5 5\n5 5 G\n");
        for line in dump.lines() {
            for tok in line.split(' ') {
                assert!(Level::from_code(tok.chars().next().unwrap()).is_some());
            }
        }
    }
}
