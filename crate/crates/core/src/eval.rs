//! NCC against ground-truth maps, feature-space FID, flip-rate and the
//! ablation report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::Tensor;

use crate::config::{Ablation, TrainConfig};
use crate::data::shapes::{synthesize_gt_map, GtProvenance, LatentLookup, TARGET_HUES};
use crate::data::{Image, Split};
use crate::engine::{self, MapStats};
use crate::error::{Error, Result};
use crate::networks::{BinModel, TargetCondition};

/// Eigenvalues of the covariance product above this (negative) tolerance are
/// clipped to zero silently; anything lower is reported.
pub const EIG_CLIP: f64 = -1e-10;

/// Normalized cross-correlation with population standard deviations.
pub fn ncc(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            expected: vec![a.len() as i64],
            actual: vec![b.len() as i64],
        });
    }
    if a.is_empty() {
        return Err(Error::UndefinedNcc("empty input"));
    }
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 {
        return Err(Error::UndefinedNcc("first input"));
    }
    if sbb <= 0.0 {
        return Err(Error::UndefinedNcc("second input"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Mean NCC in both directions for one ordered class pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub plus: Option<f64>,
    pub minus: Option<f64>,
    pub n: usize,
}

/// Pair key used in reports, e.g. `red->green`.
pub fn pair_key(names: &[String], a: usize, b: usize) -> String {
    format!("{}->{}", names[a], names[b])
}

/// Directional NCC over latent-swap ground truth.
///
/// For a sample `x_a` of class `a` and target `b`, the forward ground truth
/// is `x_b − x_a` where `x_b` differs from `x_a` only in object hue. NCC(+)
/// compares `M(x_a, e_b)` with it; NCC(−) compares the reverse map
/// `M(x_b, e_a)` with `x_a − x_b`. `maps` turns `(image, condition)` pairs
/// into maps, so ground-truth plumbing can be tested without a model.
pub fn ncc_directional<F>(
    samples: &Split,
    lookup: &dyn LatentLookup,
    class_names: &[String],
    max_per_class: usize,
    mut maps: F,
) -> Result<BTreeMap<String, PairScore>>
where
    F: FnMut(&[(&Image, &TargetCondition)]) -> Result<Vec<Image>>,
{
    let k = class_names.len();
    let mut taken = vec![0usize; k];
    let mut sums: BTreeMap<(usize, usize), (f64, usize, f64, usize)> = BTreeMap::new();
    for pos in 0..samples.len() {
        let Some(lat) = samples.latents(pos).copied() else {
            return Err(Error::Contract("NCC needs samples with latent factors".into()));
        };
        let a = samples.label(pos);
        if taken[a] >= max_per_class {
            continue;
        }
        taken[a] += 1;
        let x_a = samples.image(pos);
        let mut jobs = Vec::new();
        for b in (0..k).filter(|&b| b != a) {
            let lat_b = lat.with_object_hue(TARGET_HUES[b]);
            let gt = synthesize_gt_map(lookup, &lat, &lat_b)?.values;
            jobs.push((b, lookup.lookup(&lat_b)?, gt));
        }
        let e: Vec<TargetCondition> = (0..k).map(|c| TargetCondition::one_hot(c, k)).collect::<Result<_>>()?;
        let mut pairs: Vec<(&Image, &TargetCondition)> = Vec::new();
        for (b, x_b, _) in &jobs {
            pairs.push((&x_a, &e[*b]));
            pairs.push((x_b, &e[a]));
        }
        let out = maps(&pairs)?;
        for (j, (b, _, gt)) in jobs.iter().enumerate() {
            let neg: Vec<f32> = gt.pixels().iter().map(|v| -v).collect();
            let entry = sums.entry((a, *b)).or_default();
            if let Ok(v) = ncc(out[2 * j].pixels(), gt.pixels()) {
                entry.0 += v;
                entry.1 += 1;
            }
            if let Ok(v) = ncc(out[2 * j + 1].pixels(), &neg) {
                entry.2 += v;
                entry.3 += 1;
            }
        }
    }
    let mut report = BTreeMap::new();
    for a in 0..k {
        for b in (0..k).filter(|&b| b != a) {
            let s = sums.get(&(a, b)).copied().unwrap_or_default();
            report.insert(
                pair_key(class_names, a, b),
                PairScore {
                    plus: (s.1 > 0).then(|| s.0 / s.1 as f64),
                    minus: (s.3 > 0).then(|| s.2 / s.3 as f64),
                    n: s.1.max(s.3),
                },
            );
        }
    }
    Ok(report)
}

/// Directional NCC for a trained model.
pub fn model_ncc(
    model: &BinModel,
    samples: &Split,
    lookup: &dyn LatentLookup,
    class_names: &[String],
    max_per_class: usize,
) -> Result<BTreeMap<String, PairScore>> {
    ncc_directional(samples, lookup, class_names, max_per_class, |pairs| {
        let with_ids: Vec<(&Image, &str, &TargetCondition)> = pairs.iter().map(|(x, y)| (*x, "", *y)).collect();
        Ok(engine::generate_pairs(model, &with_ids)?
            .into_iter()
            .map(|r| r.map.values)
            .collect())
    })
}

/// Averages of the defined pair scores.
pub fn mean_ncc(scores: &BTreeMap<String, PairScore>) -> (Option<f64>, Option<f64>) {
    let avg = |f: fn(&PairScore) -> Option<f64>| {
        let v: Vec<f64> = scores.values().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    (avg(|s| s.plus), avg(|s| s.minus))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fid {
    pub value: f64,
    /// Most negative eigenvalue seen below the clipping tolerance, if any.
    pub clipped_below_tolerance: Option<f64>,
}

/// Mean and unbiased covariance of row-wise samples.
pub fn moments(x: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::EmptyBatch("fid needs at least two samples per set"));
    }
    let mu = x.row_mean().transpose();
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= mu.transpose();
    }
    Ok((mu, c.transpose() * &c / (n as f64 - 1.0)))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets (rows are
/// samples). `Tr((Σ_r Σ_f)^{1/2})` is computed from the eigenvalues of the
/// symmetric matrix `Σ_r^{1/2} Σ_f Σ_r^{1/2}`, which shares them.
pub fn fid(real: &DMatrix<f64>, fake: &DMatrix<f64>) -> Result<Fid> {
    if real.ncols() != fake.ncols() {
        return Err(Error::Shape {
            expected: vec![real.ncols() as i64],
            actual: vec![fake.ncols() as i64],
        });
    }
    let (mu_r, s_r) = moments(real)?;
    let (mu_f, s_f) = moments(fake)?;
    fid_from_moments(&mu_r, &s_r, &mu_f, &s_f)
}

pub fn fid_from_moments(
    mu_r: &DVector<f64>,
    s_r: &DMatrix<f64>,
    mu_f: &DVector<f64>,
    s_f: &DMatrix<f64>,
) -> Result<Fid> {
    let root = sym_sqrt(s_r);
    let mut p = &root * s_f * &root;
    p = (&p + p.transpose()) * 0.5;
    let eig = SymmetricEigen::new(p).eigenvalues;
    let mut worst: Option<f64> = None;
    let mut tr_sqrt = 0.0;
    for &l in eig.iter() {
        if l < EIG_CLIP {
            worst = Some(worst.map_or(l, |w: f64| w.min(l)));
        }
        tr_sqrt += l.max(0.0).sqrt();
    }
    if let Some(w) = worst {
        log::warn!("covariance product has eigenvalue {w:e} below tolerance; clipped to 0");
    }
    let d = mu_r - mu_f;
    let value = (d.dot(&d) + s_r.trace() + s_f.trace() - 2.0 * tr_sqrt).max(0.0);
    if !value.is_finite() {
        return Err(Error::NonFinite { term: "fid" });
    }
    Ok(Fid {
        value,
        clipped_below_tolerance: worst,
    })
}

fn to_matrix(t: &Tensor) -> Result<DMatrix<f64>> {
    let t = t.to_kind(tch::Kind::Double).contiguous();
    let (r, c) = (t.size()[0] as usize, t.size()[1] as usize);
    let v = Vec::<f64>::try_from(t.flatten(0, -1))?;
    Ok(DMatrix::from_row_slice(r, c, &v))
}

/// Classifier penultimate features for a list of images.
pub fn features(model: &BinModel, images: &[&Image], chunk: usize) -> Result<DMatrix<f64>> {
    let mut rows = Vec::new();
    let mut dim = 0;
    for c in images.chunks(chunk.max(1)) {
        let flat: Vec<f32> = c.iter().flat_map(|im| im.pixels().iter().copied()).collect();
        let x = model.to_input(&Tensor::from_slice(&flat).view(c[0].shape().nchw(c.len())));
        let f = to_matrix(&tch::no_grad(|| model.embed(&x))?)?;
        dim = f.ncols();
        rows.extend(f.row_iter().map(|r| r.clone_owned()));
    }
    Ok(DMatrix::from_rows(&rows).resize(rows.len(), dim, 0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    /// Per target class; `None` when the class could not be scored.
    pub per_class: BTreeMap<String, Option<f64>>,
    pub avg: Option<f64>,
    pub real_per_class: usize,
    pub fake_per_class: usize,
    /// Classes with fewer real samples than requested.
    pub flagged: Vec<String>,
}

/// Per-target-class FID: real features from test images of class `k`, fake
/// features from the first `n` test images translated to `k`.
pub fn fid_per_class(
    model: &BinModel,
    test: &Split,
    class_names: &[String],
    n: usize,
    chunk: usize,
) -> Result<FidReport> {
    let k = class_names.len();
    let sources: Vec<Image> = (0..n.min(test.len())).map(|p| test.image(p)).collect();
    let mut per_class = BTreeMap::new();
    let mut flagged = Vec::new();
    let mut real_n = usize::MAX;
    for c in 0..k {
        let real: Vec<Image> = (0..test.len())
            .filter(|&p| test.label(p) == c)
            .take(n)
            .map(|p| test.image(p))
            .collect();
        real_n = real_n.min(real.len());
        if real.len() < n {
            flagged.push(class_names[c].clone());
        }
        if real.len() < 2 || sources.len() < 2 {
            per_class.insert(class_names[c].clone(), None);
            continue;
        }
        let y = TargetCondition::one_hot(c, k)?;
        let mut fakes = Vec::with_capacity(sources.len());
        for s in sources.chunks(chunk.max(1)) {
            let pairs: Vec<(&Image, &str, &TargetCondition)> = s.iter().map(|im| (im, "", &y)).collect();
            fakes.extend(
                engine::generate_pairs(model, &pairs)?
                    .into_iter()
                    .map(|r| r.synthesized),
            );
        }
        let fr = features(model, &real.iter().collect::<Vec<_>>(), chunk)?;
        let ff = features(model, &fakes.iter().collect::<Vec<_>>(), chunk)?;
        per_class.insert(class_names[c].clone(), Some(fid(&fr, &ff)?.value));
    }
    let vals: Vec<f64> = per_class.values().flatten().copied().collect();
    Ok(FidReport {
        avg: (vals.len() == k).then(|| vals.iter().sum::<f64>() / k as f64),
        per_class,
        real_per_class: if real_n == usize::MAX { 0 } else { real_n },
        fake_per_class: sources.len(),
        flagged,
    })
}

/// Fraction of pairs with `argmax F(x̃) == argmax y`.
pub fn flip_rate(model: &BinModel, pairs: &[(&Image, &TargetCondition)], chunk: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyBatch("flip_rate"));
    }
    let mut hits = 0usize;
    for c in pairs.chunks(chunk.max(1)) {
        let with_ids: Vec<(&Image, &str, &TargetCondition)> = c.iter().map(|(x, y)| (*x, "", *y)).collect();
        for (r, (_, y)) in engine::generate_pairs(model, &with_ids)?.iter().zip(c) {
            if r.logits_after.argmax() == y.argmax() {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

/// `n` (sample, uniform random one-hot target) pairs drawn with `seed`.
pub fn random_target_pairs(split: &Split, n: usize, k: usize, seed: u64) -> Result<Vec<(Image, TargetCondition)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n.min(split.len()))
        .map(|p| Ok((split.image(p), TargetCondition::one_hot(rng.random_range(0..k), k)?)))
        .collect()
}

/// Summary statistics of maps for random targets (sign bias, magnitude).
pub fn map_bias(model: &BinModel, pairs: &[(Image, TargetCondition)]) -> Result<MapStats> {
    let refs: Vec<(&Image, &str, &TargetCondition)> = pairs.iter().map(|(x, y)| (x, "", y)).collect();
    let mut all = Vec::new();
    for c in refs.chunks(100) {
        for r in engine::generate_pairs(model, c)? {
            all.extend_from_slice(r.map.values.pixels());
        }
    }
    Ok(MapStats::of(&all))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub name: String,
    pub removed: Vec<String>,
    /// Per ordered class pair; empty when no ground truth is available.
    pub ncc: BTreeMap<String, PairScore>,
    pub ncc_plus: Option<f64>,
    pub ncc_minus: Option<f64>,
    pub fid: Option<FidReport>,
    pub flip_rate: Option<f64>,
    pub n: usize,
    pub map_stats: Option<MapStats>,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub dataset: String,
    pub model_ref: String,
    pub gt_provenance: Option<GtProvenance>,
    pub variants: Vec<VariantReport>,
}

impl EvaluationReport {
    pub fn variant(&self, name: &str) -> Option<&VariantReport> {
        self.variants.iter().find(|v| v.name == name)
    }

    /// Table layout: one row per variant with NCC(+), NCC(−), FID avg and
    /// flip-rate, followed by per-pair NCC rows.
    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("variant,removed,ncc_plus,ncc_minus,fid_avg,flip_rate,n\n");
        for v in &self.variants {
            out += &format!(
                "{},{},{},{},{},{},{}\n",
                v.name,
                v.removed.join("+"),
                f(v.ncc_plus),
                f(v.ncc_minus),
                f(v.fid.as_ref().and_then(|r| r.avg)),
                f(v.flip_rate),
                v.n
            );
        }
        if self.variants.iter().any(|v| !v.ncc.is_empty()) {
            out += "\nvariant,pair,ncc_plus,ncc_minus,n\n";
            for v in &self.variants {
                for (pair, s) in &v.ncc {
                    out += &format!("{},{},{},{},{}\n", v.name, pair, f(s.plus), f(s.minus), s.n);
                }
            }
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let json = dir.join("report.json");
        let csv = dir.join("report.csv");
        std::fs::write(&json, serde_json::to_vec_pretty(self)?)?;
        std::fs::write(&csv, self.to_csv())?;
        Ok((json, csv))
    }
}

/// What to compute for one evaluated model.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub flip_pairs: usize,
    pub fid_per_class: Option<usize>,
    pub ncc_per_class: Option<usize>,
    pub seed: u64,
    pub chunk: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            flip_pairs: 1000,
            fid_per_class: Some(1000),
            ncc_per_class: Some(100),
            seed: 0,
            chunk: 100,
        }
    }
}

/// Evaluates one model. NCC runs only when a latent lookup is given and the
/// split carries latent factors; FID only when requested.
pub fn evaluate_variant(
    name: &str,
    removed: &[Ablation],
    model: &BinModel,
    test: &Split,
    class_names: &[String],
    lookup: Option<&dyn LatentLookup>,
    opts: &EvalOptions,
) -> Result<VariantReport> {
    let k = class_names.len();
    let mut notes = Vec::new();
    let pairs = random_target_pairs(test, opts.flip_pairs, k, opts.seed)?;
    let refs: Vec<(&Image, &TargetCondition)> = pairs.iter().map(|(x, y)| (x, y)).collect();
    let flip = flip_rate(model, &refs, opts.chunk)?;
    let stats = map_bias(model, &pairs[..pairs.len().min(200)])?;
    let ncc = match (lookup, opts.ncc_per_class) {
        (Some(l), Some(m)) if !test.is_empty() && test.latents(0).is_some() => {
            model_ncc(model, test, l, class_names, m)?
        }
        (_, None) => BTreeMap::new(),
        _ => {
            notes.push("ncc skipped: no ground-truth maps for this dataset".into());
            BTreeMap::new()
        }
    };
    let fid = match opts.fid_per_class {
        Some(n) => Some(fid_per_class(model, test, class_names, n, opts.chunk)?),
        None => None,
    };
    let (plus, minus) = mean_ncc(&ncc);
    Ok(VariantReport {
        name: name.into(),
        removed: removed.iter().map(|a| a.token().to_string()).collect(),
        ncc,
        ncc_plus: plus,
        ncc_minus: minus,
        fid,
        flip_rate: Some(flip),
        n: pairs.len(),
        map_stats: Some(stats),
        notes,
    })
}

/// The seven ablation variants: full model, each single removal, cls+map,
/// and everything removed.
pub fn standard_variants() -> Vec<(String, Vec<Ablation>)> {
    use Ablation::*;
    vec![
        ("full".into(), vec![]),
        ("no_y".into(), vec![DropConditionY]),
        ("no_cls".into(), vec![DropCls]),
        ("no_cyc".into(), vec![DropCyc]),
        ("no_map".into(), vec![DropMap]),
        ("no_cls_map".into(), vec![DropCls, DropMap]),
        ("no_all".into(), vec![DropConditionY, DropCls, DropCyc, DropMap]),
    ]
}

/// Config for one ablation variant derived from a base config.
pub fn variant_config(base: &TrainConfig, name: &str, removed: &[Ablation]) -> TrainConfig {
    let mut c = base.clone();
    c.name = format!("{}-{name}", base.name);
    c.ablation = removed.iter().copied().collect();
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect()
    }

    #[test]
    fn ncc_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = rand_vec(&mut rng, 50);
        let neg: Vec<f32> = a.iter().map(|v| -v).collect();
        assert!((ncc(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((ncc(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(ncc(&a, &[0.5; 50]), Err(Error::UndefinedNcc(_))));
        assert!(ncc(&a, &a[..10]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn ncc_bounds_and_affine_invariance(
            seed in any::<u64>(),
            n in 2usize..64,
            c in 0.01f32..100.0,
            d in -10.0f32..10.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_vec(&mut rng, n);
            let b = rand_vec(&mut rng, n);
            let v = ncc(&a, &b).unwrap();
            prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&v));
            let bt: Vec<f32> = b.iter().map(|x| c * x + d).collect();
            let w = ncc(&a, &bt).unwrap();
            prop_assert!((v - w).abs() < 1e-4, "{} vs {}", v, w);
        }
    }

    #[test]
    fn fid_identical_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::from_fn(60, 5, |_, _| rng.random::<f64>());
        assert!(fid(&x, &x).unwrap().value <= 1e-6);
    }

    #[test]
    fn fid_mean_term_analytic() {
        let mu0 = DVector::from_vec(vec![0.0]);
        let mu1 = DVector::from_vec(vec![1.0]);
        let one = DMatrix::from_element(1, 1, 1.0);
        let f = fid_from_moments(&mu0, &one, &mu1, &one).unwrap();
        assert!((f.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fid_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = DMatrix::from_fn(40, 4, |_, _| rng.random::<f64>());
        let b = DMatrix::from_fn(50, 4, |_, j| rng.random::<f64>() * (j + 1) as f64);
        let (x, y) = (fid(&a, &b).unwrap().value, fid(&b, &a).unwrap().value);
        assert!((x - y).abs() < 1e-8, "{x} {y}");
    }
}
