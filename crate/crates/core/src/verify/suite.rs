use std::fmt;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::ablation::AblationReport;
use super::gradcheck::{
    finite_diff_grad, reduced_model_config, LossTarget, ModelTarget,
};
use super::oracles::{max_abs_diff, naive_interact, naive_project};
use crate::data::{render_comparison_map, synth_generate, SynthConfig, FN_COLOR, FP_COLOR, TN_COLOR, TP_COLOR};
use crate::encoder::{EncoderConfig, FeatureMap};
use crate::error::Result;
use crate::interaction::{interact, InteractionParams};
use crate::metrics::{f1_from, precision_recall_f1, ConfusionCounts};
use crate::model::{BgiNet, ModelConfig};
use crate::projection::{project, GraphEmbedding, ProjectionParams};
use crate::train::{evaluate, train_on, Checkpoint, TrainConfig};

/// Published parameter count of the full model, in millions.
pub const PARAM_ANCHOR: f64 = 2.88;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mark = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{mark}] {}. {}: {}", self.id, self.name, self.detail)
    }
}

fn outcome(id: usize, name: &'static str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome { id, name, passed, detail }
}

fn failed(id: usize, name: &'static str, err: crate::Error) -> CheckOutcome {
    outcome(id, name, false, format!("error: {err}"))
}

pub fn format_table(rows: &[CheckOutcome]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut s = format!("{:<3} {:<width$}  {:<6} {}\n", "#", "check", "result", "detail");
    for r in rows {
        let mark = if r.passed { "PASS" } else { "FAIL" };
        s.push_str(&format!("{:<3} {:<width$}  {:<6} {}\n", r.id, r.name, mark, r.detail));
    }
    let passed = rows.iter().filter(|r| r.passed).count();
    s.push_str(&format!("{passed}/{} passed\n", rows.len()));
    s
}

/// Confusion counts whose precision and recall are exactly `p`, `r` (percent, two decimals).
fn counts_for(p: f64, r: f64) -> ConfusionCounts {
    let (p, r) = ((p * 100.0).round() as u64, (r * 100.0).round() as u64);
    let tp = p * r;
    ConfusionCounts {
        tp,
        fp: r * 10_000 - tp,
        fn_: p * 10_000 - tp,
        tn: 0,
    }
}

pub fn check_f1_reference() -> CheckOutcome {
    let cases = [(91.84, 90.22, 91.02), (88.52, 88.00, 88.25)];
    let mut ok = true;
    let mut parts = Vec::new();
    for (p, r, expected) in cases {
        let (direct, _) = f1_from(p, r);
        let s = precision_recall_f1(&counts_for(p, r));
        let good = (direct - expected).abs() <= 0.01
            && (s.f1 - expected).abs() <= 0.01
            && (s.precision - p).abs() < 1e-9
            && (s.recall - r).abs() < 1e-9;
        ok &= good;
        parts.push(format!("F1({p:.2}, {r:.2}) = {:.4} (want {expected:.2} ± 0.01)", s.f1));
    }
    outcome(1, "metric oracle", ok, parts.join("; "))
}

fn normal_matrix<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || scale * rng.sample::<f64, _>(StandardNormal))
}

fn random_map<R: Rng>(d: usize, h: usize, w: usize, scale: f64, rng: &mut R) -> FeatureMap<f64> {
    FeatureMap::new(
        Array3::from_shape_simple_fn((d, h, w), || scale * rng.sample::<f64, _>(StandardNormal)),
        1,
    )
}

/// Descriptions of every violated embedding invariant at tolerance `tol`.
pub fn projection_violations(g: &GraphEmbedding<f64>, tol: f64) -> Vec<String> {
    let mut v = Vec::new();
    for (i, row) in g.assignment.outer_iter().enumerate() {
        let sum: f64 = row.sum();
        if (sum - 1.0).abs() > tol || row.iter().any(|&q| !(-tol..=1.0 + tol).contains(&q)) {
            v.push(format!("assignment row {i} sums to {sum}"));
        }
    }
    for (k, row) in g.vertex_features.outer_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm != 0.0 && (norm - 1.0).abs() > tol {
            v.push(format!("vertex {k} has norm {norm}"));
        }
    }
    let a = &g.affinity;
    for i in 0..a.nrows() {
        let d = a[[i, i]];
        if d.abs() > tol && (d - 1.0).abs() > tol {
            v.push(format!("affinity diagonal {i} is {d}"));
        }
        for j in 0..a.ncols() {
            if (a[[i, j]] - a[[j, i]]).abs() > tol || a[[i, j]].abs() > 1.0 + tol {
                v.push(format!("affinity ({i}, {j}) = {}", a[[i, j]]));
            }
        }
    }
    v
}

pub fn check_projection_invariants(instances: usize, seed: u64) -> CheckOutcome {
    const NAME: &str = "projection invariants";
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starved = 0;
    for i in 0..instances {
        let (h, w) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let d = rng.gen_range(1..=16);
        let k = rng.gen_range(1..=8);
        let x_scale = [0.1, 1.0, 5.0][rng.gen_range(0..3)];
        let x = random_map(d, h, w, x_scale, &mut rng);
        let anchors = normal_matrix(k, d, 1.0, &mut rng);
        let logits = normal_matrix(k, d, 2.0, &mut rng);
        let params = match ProjectionParams::from_arrays(anchors, logits) {
            Ok(p) => p,
            Err(e) => return failed(2, NAME, e),
        };
        let g = match project(&x, &params) {
            Ok(g) => g,
            Err(e) => return failed(2, NAME, e),
        };
        starved += g.starved_vertices.len();
        if let Some(v) = projection_violations(&g, 1e-6).first() {
            return outcome(2, NAME, false, format!("instance {i}: {v}"));
        }
    }
    let seconds = start.elapsed().as_secs_f64();
    outcome(
        2,
        NAME,
        seconds < 30.0,
        format!("{instances} instances within 1e-6 ({starved} starved vertices seen) in {seconds:.2}s (limit 30s)"),
    )
}

pub fn check_oracles(instances: usize, seed: u64) -> CheckOutcome {
    const NAME: &str = "oracle equivalence";
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_p, mut worst_i) = (0.0f64, 0.0f64);
    for _ in 0..instances {
        let (h, w) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let d = rng.gen_range(1..=8);
        let k = rng.gen_range(1..=4);
        let x = random_map(d, h, w, 1.0, &mut rng);
        let params = ProjectionParams::from_arrays(normal_matrix(k, d, 1.0, &mut rng), normal_matrix(k, d, 1.0, &mut rng))
            .expect("matching shapes");
        let g = match project(&x, &params) {
            Ok(g) => g,
            Err(e) => return failed(3, NAME, e),
        };
        let rows: Vec<Vec<f64>> = x.to_pixel_rows().outer_iter().map(|r| r.to_vec()).collect();
        let n = naive_project(&rows, &params);
        worst_p = worst_p
            .max(max_abs_diff(&g.assignment, &n.assignment))
            .max(max_abs_diff(&g.vertex_features, &n.vertex_features))
            .max(max_abs_diff(&g.affinity, &n.affinity));
    }
    for _ in 0..instances {
        let d = 2 * rng.gen_range(1..=4);
        let k = rng.gen_range(1..=4);
        let params = match InteractionParams::new(d, &mut rng) {
            Ok(p) => p,
            Err(e) => return failed(3, NAME, e),
        };
        let embed = |rng: &mut ChaCha8Rng| GraphEmbedding {
            vertex_features: normal_matrix(k, d, 1.0, rng),
            affinity: Array2::zeros((k, k)),
            assignment: Array2::zeros((1, k)),
            starved_vertices: Vec::new(),
        };
        let (g1, g2) = (embed(&mut rng), embed(&mut rng));
        let (o1, o2) = match interact(&g1, &g2, &params) {
            Ok(o) => o,
            Err(e) => return failed(3, NAME, e),
        };
        let rows = |m: &Array2<f64>| m.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>();
        let (n1, n2) = naive_interact(&rows(&g1.vertex_features), &rows(&g2.vertex_features), &params);
        worst_i = worst_i.max(max_abs_diff(&o1, &n1)).max(max_abs_diff(&o2, &n2));
    }
    outcome(
        3,
        NAME,
        worst_p <= 1e-6 && worst_i <= 1e-5,
        format!(
            "project max |Δ| = {worst_p:.2e} (≤ 1e-6), interact max |Δ| = {worst_i:.2e} (≤ 1e-5), {instances} instances each, {:.2}s",
            start.elapsed().as_secs_f64()
        ),
    )
}

pub fn check_gradients(seed: u64) -> CheckOutcome {
    const NAME: &str = "gradient checks";
    let start = Instant::now();
    let run = || -> Result<(f64, String, usize, f64)> {
        let mut model = ModelTarget::random(&reduced_model_config(2), seed, 2, 16)?;
        let full = finite_diff_grad(&mut model, 1e-3)?;
        let worst = full.worst_group().map_or(String::new(), |g| g.name.clone());
        let mut loss_err: f64 = 0.0;
        for s in 0..4 {
            let mut t = LossTarget::random(seed + s, 4, 4);
            loss_err = loss_err.max(finite_diff_grad(&mut t, 1e-3)?.max_scaled_error());
        }
        Ok((full.max_scaled_error(), worst, full.kinked(), loss_err))
    };
    match run() {
        Ok((full, worst, kinked, loss)) => outcome(
            4,
            NAME,
            full <= 1e-4 && loss <= 1e-5,
            format!(
                "full model max rel error {full:.2e} (≤ 1e-4, worst group {worst}, {kinked} kink-straddling coordinates excluded), loss {loss:.2e} (≤ 1e-5), {:.1}s",
                start.elapsed().as_secs_f64()
            ),
        ),
        Err(e) => failed(4, NAME, e),
    }
}

pub fn check_ablation(report: &AblationReport) -> CheckOutcome {
    let base = report.mean_f1(false);
    let gim = report.mean_f1(true);
    let slowest = report.runs.iter().map(|r| r.seconds).fold(0.0, f64::max);
    let calibrated = (0.60..=0.90).contains(&base);
    outcome(
        5,
        "ablation direction",
        gim >= base && calibrated && slowest < 900.0,
        format!(
            "mean test F1 +GIM {gim:.4} vs baseline {base:.4} (baseline in [0.60, 0.90]: {calibrated}), slowest run {slowest:.0}s"
        ),
    )
}

pub fn check_param_count() -> CheckOutcome {
    const NAME: &str = "parameter budget";
    match BgiNet::<f32>::new(&ModelConfig::default(), 0) {
        Ok(m) => {
            let n = m.num_params();
            let millions = n as f64 / 1e6;
            outcome(
                6,
                NAME,
                (2.6e6..=3.3e6).contains(&(n as f64)),
                format!(
                    "{n} parameters = {millions:.3} M (window [2.6, 3.3] M; anchor {PARAM_ANCHOR} M, ratio {:.3})",
                    millions / PARAM_ANCHOR
                ),
            )
        }
        Err(e) => failed(6, NAME, e),
    }
}

/// Two identical short runs plus a checkpoint round trip; `work_dir` receives the checkpoint.
pub fn check_determinism(work_dir: &Path) -> CheckOutcome {
    const NAME: &str = "determinism";
    let run = || -> Result<(bool, bool)> {
        let synth = SynthConfig {
            canvas_size: 32,
            pairs: 16,
            base_shapes: 2,
            min_shape: 6,
            max_shape: 10,
            shadow_length: 2,
            seed: 11,
            ..SynthConfig::default()
        };
        let records = synth_generate(&synth)?;
        let (train, test) = records.split_at(12);
        let mut cfg = TrainConfig {
            total_epochs: 2,
            batch_size: 4,
            seed: 3,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        cfg.model = ModelConfig {
            encoder: EncoderConfig {
                stage_channels: vec![8, 8, 16, 16],
                output_stride: 8,
                ..EncoderConfig::default()
            },
            vertices: 4,
            use_gim: true,
        };
        let a = train_on(&cfg, train, test)?;
        let b = train_on(&cfg, train, test)?;
        let report_a = evaluate(&a.best.model, test, cfg.threshold, "test", None)?;
        let report_b = evaluate(&b.best.model, test, cfg.threshold, "test", None)?;
        let same_runs = report_a.to_json()? == report_b.to_json()? && report_a.to_text() == report_b.to_text();

        let path = work_dir.join("determinism.ckpt");
        a.best.save(&path)?;
        let loaded = Checkpoint::load_expecting(&path, &cfg.model)?;
        let mut same_ckpt = evaluate(&loaded.model, test, cfg.threshold, "test", None)?.to_json()? == report_a.to_json()?;
        for r in test {
            let before = crate::train::predict(&a.best.model, &r.image_t1, &r.image_t2)?;
            let after = crate::train::predict(&loaded.model, &r.image_t1, &r.image_t2)?;
            same_ckpt &= before
                .logits
                .iter()
                .zip(after.logits.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits());
        }
        Ok((same_runs, same_ckpt))
    };
    match run() {
        Ok((runs, ckpt)) => outcome(
            7,
            NAME,
            runs && ckpt,
            format!("same-seed reports identical: {runs}; save→load→evaluate bit-identical: {ckpt}"),
        ),
        Err(e) => failed(7, NAME, e),
    }
}

pub fn check_render_colors() -> CheckOutcome {
    const NAME: &str = "rendering";
    let cases = [
        ((1u8, 1u8), TP_COLOR, "TP yellow"),
        ((1, 0), FP_COLOR, "FP red"),
        ((0, 1), FN_COLOR, "FN blue"),
        ((0, 0), TN_COLOR, "TN black"),
    ];
    let expected = [[255, 255, 0], [255, 0, 0], [0, 0, 255], [0, 0, 0]];
    let mut ok = true;
    for (((p, g), color, _), want) in cases.iter().zip(expected) {
        let pred = Array2::from_elem((1, 1), *p);
        let gt = Array2::from_elem((1, 1), *g);
        match render_comparison_map(pred.view(), gt.view()) {
            Ok(img) => ok &= img.iter().copied().eq(want) && *color == want,
            Err(e) => return failed(8, NAME, e),
        }
    }
    let names: Vec<&str> = cases.iter().map(|c| c.2).collect();
    outcome(8, NAME, ok, names.join(", "))
}

/// Every check except the (long) ablation.
pub fn run_quick_suite(work_dir: &Path) -> Vec<CheckOutcome> {
    vec![
        check_f1_reference(),
        check_projection_invariants(1000, 0),
        check_oracles(50, 1),
        check_gradients(2),
        check_param_count(),
        check_determinism(work_dir),
        check_render_colors(),
    ]
}
