use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest, Manifest, ManifestRecord};
use super::trace::{write_embedding, write_trace};
use super::IngestError;
use crate::numkit::{dot, norm, standard_normal, Vector};
use crate::signals::{
    slice_variance, split_point, HiddenStateTrace, ReferenceEmbedding, REFERENCE_DIM,
};
use crate::training::{Tier, TierCounts, TrainingExample};

/// How layer-to-layer variance evolves across the trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvergenceProfile {
    /// Late-slice variance at most a quarter of the early-slice variance.
    Convergent,
    /// Both slices within 10% of each other.
    Flat,
    /// Early-slice variance at most a quarter of the late-slice variance.
    Divergent,
}

impl ConvergenceProfile {
    pub fn for_tier(tier: Tier) -> Self {
        match tier {
            Tier::High => ConvergenceProfile::Convergent,
            Tier::Medium => ConvergenceProfile::Flat,
            Tier::Low => ConvergenceProfile::Divergent,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub tier: Tier,
    /// Cosine between the zero-padded final hidden state and the reference
    /// (before the small out-of-support tail is mixed in).
    pub alignment_target: f64,
    pub convergence_profile: ConvergenceProfile,
}

impl SynthSpec {
    /// Tier-typical alignment and profile.
    pub fn for_tier(seed: u64, hidden_dim: usize, num_layers: usize, tier: Tier) -> Self {
        Self {
            seed,
            hidden_dim,
            num_layers,
            tier,
            alignment_target: tier_alignment(tier),
            convergence_profile: ConvergenceProfile::for_tier(tier),
        }
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if self.hidden_dim == 0 {
            return Err(IngestError::Spec("hidden_dim must be at least 1".into()));
        }
        if self.num_layers < 2 {
            return Err(IngestError::Spec("num_layers must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.alignment_target) {
            return Err(IngestError::Spec(format!(
                "alignment_target must lie in [0, 1], got {}",
                self.alignment_target
            )));
        }
        if self.convergence_profile == ConvergenceProfile::Convergent && self.num_layers < 3 {
            return Err(IngestError::Spec(
                "a convergent profile needs at least 3 layers (L = 2 leaves a single-layer early slice)".into(),
            ));
        }
        Ok(())
    }
}

fn tier_alignment(tier: Tier) -> f64 {
    match tier {
        Tier::High => 0.9,
        Tier::Medium => 0.6,
        Tier::Low => 0.1,
    }
}

/// Norm of the reference component outside the probe's support.
const TAIL_NORM: f64 = 0.05;
const JITTER: f64 = 0.05;

fn gaussian(h: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..h).map(|_| standard_normal(rng)).collect()
}

/// Fixed per-tier direction shared by every corpus.
fn prototype(tier: Tier, h: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7072_6f74_6f00 + tier as u64);
    gaussian(h, &mut rng)
}

fn f32_round(v: &mut [f64]) {
    for x in v {
        *x = f64::from(*x as f32);
    }
}

fn layers_of(center: &[f64], devs: &[Vec<f64>], amps: &[f64]) -> Vec<Vec<f64>> {
    devs.iter()
        .zip(amps)
        .map(|(d, a)| center.iter().zip(d).map(|(c, x)| c + a * x).collect())
        .collect()
}

fn variances(layers: &[Vec<f64>]) -> (f64, f64) {
    let vs: Vec<Vector> = layers.iter().cloned().map(Vector::new).collect();
    let mid = split_point(vs.len());
    (slice_variance(&vs[..=mid]), slice_variance(&vs[mid..]))
}

fn shaped_layers(spec: &SynthSpec, center: &[f64], rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let (l, h) = (spec.num_layers, spec.hidden_dim);
    let mid = split_point(l);
    let devs: Vec<Vec<f64>> = (0..l).map(|_| gaussian(h, rng)).collect();
    match spec.convergence_profile {
        ConvergenceProfile::Convergent | ConvergenceProfile::Divergent => {
            let convergent = spec.convergence_profile == ConvergenceProfile::Convergent;
            let mut amps: Vec<f64> = (0..l)
                .map(|i| match (i < mid, i == mid, convergent) {
                    (true, _, true) | (false, false, false) => 1.0,
                    _ => 0.1,
                })
                .collect();
            // shrink the quiet side until the ratio requirement holds
            for _ in 0..64 {
                let layers = layers_of(center, &devs, &amps);
                let (v1, v2) = variances(&layers);
                let ok = if convergent {
                    v2 <= v1 / 4.0
                } else {
                    v1 <= v2 / 4.0
                };
                if ok {
                    return layers;
                }
                for (i, a) in amps.iter_mut().enumerate() {
                    let quiet = if convergent { i >= mid } else { i <= mid };
                    if quiet {
                        *a *= 0.5;
                    }
                }
            }
            layers_of(center, &devs, &amps)
        }
        ConvergenceProfile::Flat => {
            // early slice as drawn; late slice mirrors it around the shared
            // middle layer, plus (for even L) one extra layer placed so the
            // late-slice variance equals the early one
            let mut layers = layers_of(center, &devs[..=mid], &vec![1.0; mid + 1]);
            for k in 1..=mid.min(l - 1 - mid) {
                layers.push(layers[mid - k].clone());
            }
            if layers.len() < l {
                let early = &layers[..=mid];
                let n = early.len() as f64;
                let mean: Vec<f64> = (0..h)
                    .map(|j| early.iter().map(|v| v[j]).sum::<f64>() / n)
                    .collect();
                let v: Vec<Vector> = early.iter().cloned().map(Vector::new).collect();
                let var = slice_variance(&v);
                let u = &devs[l - 1];
                let target = (h as f64 * var * (n + 1.0) / n).sqrt();
                let un = norm(u).max(1e-12);
                layers.push(
                    mean.iter()
                        .zip(u)
                        .map(|(m, x)| m + target * x / un)
                        .collect(),
                );
            }
            layers
        }
    }
}

/// Unit vector in the first `support` dims orthogonal to `r`.
fn orthogonal_unit(r: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let support = r.len();
    if support == 1 {
        return vec![0.0];
    }
    loop {
        let mut n = gaussian(support, rng);
        let p = dot(&n, r);
        for (x, ri) in n.iter_mut().zip(r) {
            *x -= p * ri;
        }
        let nn = norm(&n);
        if nn > 1e-6 {
            n.iter_mut().for_each(|x| *x /= nn);
            return n;
        }
    }
}

fn reference_for(h_final: &[f64], target: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let support = h_final.len().min(REFERENCE_DIM);
    let head = &h_final[..support];
    let hn = norm(head);
    let r_hat: Vec<f64> = if hn > 1e-12 {
        head.iter().map(|x| x / hn).collect()
    } else {
        let mut e = vec![0.0; support];
        e[0] = 1.0;
        e
    };
    let n_hat = orthogonal_unit(&r_hat, rng);
    let off = (1.0 - target * target).max(0.0).sqrt();
    let tail_norm = if support < REFERENCE_DIM {
        TAIL_NORM
    } else {
        0.0
    };
    let head_scale = (1.0 - tail_norm * tail_norm).sqrt();
    let mut out = vec![0.0; REFERENCE_DIM];
    for i in 0..support {
        out[i] = head_scale * (target * r_hat[i] + off * n_hat[i]);
    }
    if tail_norm > 0.0 {
        let tail = gaussian(REFERENCE_DIM - support, rng);
        let tn = norm(&tail);
        for (o, t) in out[support..].iter_mut().zip(&tail) {
            *o = tail_norm * t / tn;
        }
    }
    f32_round(&mut out);
    let n = norm(&out);
    out.iter_mut().for_each(|x| *x /= n);
    f32_round(&mut out);
    out
}

/// Deterministic synthetic trace and reference embedding.
///
/// The final hidden state sits near a fixed tier prototype, so tiers are
/// separable from `h_final`; the identity-padding probe has cosine
/// `≈ alignment_target` with the reference; layer variances follow the profile.
pub fn synth_trace(
    spec: &SynthSpec,
) -> Result<(HiddenStateTrace, ReferenceEmbedding, Tier), IngestError> {
    synth_with_id(spec, &format!("synth-{:016x}", spec.seed))
}

fn synth_with_id(
    spec: &SynthSpec,
    id: &str,
) -> Result<(HiddenStateTrace, ReferenceEmbedding, Tier), IngestError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let h = spec.hidden_dim;
    let proto = prototype(spec.tier, h);
    let center: Vec<f64> = proto
        .iter()
        .map(|p| p + 0.5 * standard_normal(&mut rng))
        .collect();
    let mut layers = shaped_layers(spec, &center, &mut rng);
    for l in &mut layers {
        f32_round(l);
    }
    let reference = reference_for(
        layers.last().expect("L >= 2"),
        spec.alignment_target,
        &mut rng,
    );
    let trace = HiddenStateTrace::new(id, layers.into_iter().map(Vector::new).collect())?;
    let reference = ReferenceEmbedding::new(id, Vector::new(reference))?;
    Ok((trace, reference, spec.tier))
}

/// A tiered synthetic corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub seed: u64,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub counts: TierCounts,
}

impl Default for CorpusSpec {
    /// The 72-example tier mix at H = 64, L = 8.
    fn default() -> Self {
        Self {
            seed: 0,
            hidden_dim: 64,
            num_layers: 8,
            counts: TierCounts::STANDARD,
        }
    }
}

/// Per-example specs and ids (`high-0000`, …), with alignment jittered by ±0.05.
fn corpus_specs(spec: &CorpusSpec) -> Vec<(String, SynthSpec)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.counts.total());
    for tier in Tier::ALL {
        for i in 0..spec.counts.get(tier) {
            let seed: u64 = rng.random();
            let jitter = rng.random_range(-JITTER..=JITTER);
            let mut s = SynthSpec::for_tier(seed, spec.hidden_dim, spec.num_layers, tier);
            s.alignment_target = (s.alignment_target + jitter).clamp(0.0, 1.0);
            out.push((format!("{tier}-{i:04}"), s));
        }
    }
    out
}

fn query_text(id: &str) -> String {
    format!("synthetic query {id}")
}

pub fn synth_pool(spec: &CorpusSpec) -> Result<Vec<TrainingExample>, IngestError> {
    corpus_specs(spec)
        .into_iter()
        .map(|(id, s)| {
            let (trace, reference, tier) = synth_with_id(&s, &id)?;
            Ok(TrainingExample::new(
                query_text(&id),
                trace,
                reference,
                tier,
            ))
        })
        .collect()
}

/// Writes `traces/<id>.hst`, `refs/<id>.hst` and `manifest.jsonl` under `dir`.
pub fn write_corpus(dir: &Path, spec: &CorpusSpec) -> Result<(PathBuf, Manifest), IngestError> {
    let mut manifest = Manifest::new(dir);
    for ex in synth_pool(spec)? {
        let id = ex.query_id().to_string();
        let trace_rel = PathBuf::from("traces").join(format!("{id}.hst"));
        let ref_rel = PathBuf::from("refs").join(format!("{id}.hst"));
        write_trace(&dir.join(&trace_rel), &ex.trace)?;
        write_embedding(&dir.join(&ref_rel), &ex.reference)?;
        let mut rec = ManifestRecord::new(id, trace_rel, ref_rel);
        rec.query_text = ex.query_text;
        rec.tier = Some(ex.tier);
        rec.hallucinated = Some(ex.hallucinated);
        rec.optimal_action = Some(ex.optimal_action);
        manifest.insert(rec)?;
    }
    let path = dir.join("manifest.jsonl");
    write_manifest(&path, &manifest)?;
    Ok((path, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::cosine;
    use crate::signals::{internal_convergence_raw, ConvergenceConfig};

    /// Pairwise-difference form of the population variance, independent of
    /// the signals module's mean-based computation.
    fn oracle_var(layers: &[Vector]) -> f64 {
        let n = layers.len() as f64;
        let h = layers[0].dim();
        let mut total = 0.0;
        for j in 0..h {
            let mut s = 0.0;
            for a in layers {
                for b in layers {
                    s += (a[j] - b[j]).powi(2);
                }
            }
            total += s / (2.0 * n * n);
        }
        total / h as f64
    }

    fn oracle_ratio(trace: &HiddenStateTrace) -> (f64, f64) {
        let l = trace.num_layers();
        let m = l.div_ceil(2);
        (
            oracle_var(&trace.layers()[..m]),
            oracle_var(&trace.layers()[m - 1..]),
        )
    }

    fn pad(h: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; REFERENCE_DIM];
        for (o, x) in out.iter_mut().zip(h) {
            *o = *x;
        }
        out
    }

    #[test]
    fn full_alignment_gives_near_unit_cosine() {
        for h in [1, 8, 64, 400] {
            let mut s = SynthSpec::for_tier(5, h, 6, Tier::High);
            s.alignment_target = 1.0;
            let (t, r, _) = synth_trace(&s).unwrap();
            let c = cosine(&pad(t.final_hidden()), r.vector()).unwrap();
            assert!(c >= 0.99, "H={h}: {c}");
        }
    }

    #[test]
    fn alignment_target_is_hit() {
        for target in [0.0, 0.1, 0.6, 0.9] {
            let mut s = SynthSpec::for_tier(9, 64, 8, Tier::Medium);
            s.alignment_target = target;
            let (t, r, _) = synth_trace(&s).unwrap();
            let c = cosine(&pad(t.final_hidden()), r.vector()).unwrap();
            assert!(
                (c - target * (1.0 - TAIL_NORM * TAIL_NORM).sqrt()).abs() < 1e-5,
                "{target}: {c}"
            );
        }
    }

    #[test]
    fn profiles_hold_under_the_variance_oracle() {
        let cfg = ConvergenceConfig::default();
        for l in 3..=12 {
            for seed in 0..10 {
                let (t, ..) = synth_trace(&SynthSpec::for_tier(seed, 16, l, Tier::High)).unwrap();
                let (v1, v2) = oracle_ratio(&t);
                assert!(v2 <= v1 / 4.0 * (1.0 + 1e-6), "convergent L={l}");
                assert!(internal_convergence_raw(&t, &cfg).unwrap() >= 2.0);

                let (t, ..) = synth_trace(&SynthSpec::for_tier(seed, 16, l, Tier::Low)).unwrap();
                let (v1, v2) = oracle_ratio(&t);
                assert!(v1 <= v2 / 4.0 * (1.0 + 1e-6), "divergent L={l}");

                let (t, ..) = synth_trace(&SynthSpec::for_tier(seed, 16, l, Tier::Medium)).unwrap();
                let (v1, v2) = oracle_ratio(&t);
                assert!(
                    (v1 - v2).abs() <= 0.1 * v1.max(v2),
                    "flat L={l}: {v1} vs {v2}"
                );
            }
        }
    }

    #[test]
    fn two_layer_edge_cases() {
        assert!(synth_trace(&SynthSpec::for_tier(1, 4, 2, Tier::High)).is_err());
        let (t, ..) = synth_trace(&SynthSpec::for_tier(1, 4, 2, Tier::Medium)).unwrap();
        assert_eq!(t.layers()[0], t.layers()[1]);
        let (t, ..) = synth_trace(&SynthSpec::for_tier(1, 4, 2, Tier::Low)).unwrap();
        let (v1, v2) = oracle_ratio(&t);
        assert!(v1 <= v2 / 4.0);
    }

    #[test]
    fn deterministic_bytes() {
        let s = SynthSpec::for_tier(77, 32, 8, Tier::Low);
        let a = synth_trace(&s).unwrap();
        let b = synth_trace(&s).unwrap();
        assert_eq!(
            super::super::encode_trace(&a.0),
            super::super::encode_trace(&b.0)
        );
        assert_eq!(
            super::super::encode_embedding(&a.1),
            super::super::encode_embedding(&b.1)
        );
    }

    #[test]
    fn standard_corpus_is_fast_and_sorted() {
        let t0 = std::time::Instant::now();
        let pool = synth_pool(&CorpusSpec::default()).unwrap();
        assert!(t0.elapsed().as_secs_f64() < 1.0);
        assert_eq!(pool.len(), 72);
        assert_eq!(pool.iter().filter(|e| e.tier == Tier::Medium).count(), 12);
        assert_eq!(pool[0].query_id(), "high-0000");
    }

    #[test]
    fn corpus_on_disk_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec {
            counts: TierCounts {
                high: 3,
                medium: 2,
                low: 3,
            },
            hidden_dim: 8,
            ..CorpusSpec::default()
        };
        let (path, _) = write_corpus(dir.path(), &spec).unwrap();
        let m = super::super::load_manifest(&path).unwrap();
        assert_eq!(m.len(), 8);
        let pool = synth_pool(&spec).unwrap();
        for ex in &pool {
            let rec = m.get(ex.query_id()).unwrap();
            let (t, r) = super::super::load_record(&m, rec).unwrap();
            assert_eq!(&t, &ex.trace);
            assert_eq!(&r, &ex.reference);
        }
    }
}
