//! Acceptance criteria, one report line each.
//!
//! Criteria that need the real digit datasets read IDX files from
//! `$FAN_DATA_ROOT` and report BLOCKED when they are absent. The full-set
//! tier additionally needs `FAN_EXTENDED=1`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fan_core::checkpoint::fingerprint;
use fan_core::experiments::{
    ablation_recipes, data_root, export_reconstructions, idx_available, run_seed, summarize, ReconMode, Recipe,
    ResultRecord, SeedRun,
};
use fan_core::losses::value;
use fan_core::model::Variant;
use fan_tensor::gradcheck::{self, BATCHNORM_TOL, DEFAULT_TOL};
use fan_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GRAD_SHAPES_PER_OP: usize = 5;
const GRAD_BUDGET_SECS: f64 = 60.0;
const CE_TOL: f64 = 1e-5;
const ADV_TOL: f64 = 1e-4;
const ABLATION_SLACK: [f64; 3] = [0.01, 0.02, 0.02];
const RETENTION_MIN: f64 = 0.60;
const CHANCE: f64 = 0.1;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Status {
    Pass,
    Fail,
    Blocked,
    Skipped,
}

struct Report {
    failures: Vec<usize>,
}

impl Report {
    fn line(&mut self, id: usize, title: &str, status: Status, detail: &str) {
        let tag = match status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Blocked => "BLOCKED",
            Status::Skipped => "SKIPPED",
        };
        // Written past the test harness capture so the lines always show.
        let mut out = std::io::stdout().lock();
        writeln!(out, "[acceptance] {id:>2} {title}: {tag} ({detail})").unwrap();
        out.flush().unwrap();
        if status == Status::Fail {
            self.failures.push(id);
        }
    }

    fn note(&self, text: &str) {
        let mut out = std::io::stdout().lock();
        writeln!(out, "[acceptance]    {text}").unwrap();
    }

    fn check(&mut self, id: usize, title: &str, ok: bool, detail: &str) {
        self.line(id, title, if ok { Status::Pass } else { Status::Fail }, detail);
    }
}

fn gradient_suite(rep: &mut Report) {
    let start = Instant::now();
    let results = gradcheck::run_suite(2024).expect("gradient suite runs");
    let secs = start.elapsed().as_secs_f64();
    let mut per_op: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    let mut bad = Vec::new();
    for r in &results {
        let pinned = if r.op == "batchnorm" { BATCHNORM_TOL } else { DEFAULT_TOL };
        let e = per_op.entry(r.op).or_default();
        e.0 += 1;
        e.1 = e.1.max(r.rel_error);
        if !(r.passed() && r.tolerance <= pinned) {
            bad.push(format!("{} {}: {:.2e}", r.op, r.shapes, r.rel_error));
        }
    }
    let thin: Vec<&str> = per_op
        .iter()
        .filter(|(_, (n, _))| *n < GRAD_SHAPES_PER_OP)
        .map(|(op, _)| *op)
        .collect();
    let worst = per_op.values().map(|v| v.1).fold(0.0, f64::max);
    let ok = bad.is_empty() && thin.is_empty() && secs < GRAD_BUDGET_SECS;
    rep.check(
        1,
        "gradient suite",
        ok,
        &format!(
            "{} ops, {} checks, worst relative error {worst:.2e}, {secs:.1}s; failing {bad:?}; under {GRAD_SHAPES_PER_OP} shapes {thin:?}",
            per_op.len(),
            results.len()
        ),
    );
}

fn loss_identities(rep: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let uniform = Tensor::full(&[8, 10], 0.7);
    let ce = value::classification(&uniform, &[0, 1, 2, 3, 4, 5, 6, 7]).unwrap() as f64;
    let zero = Tensor::zeros(&[6, 1]);
    let adv = value::discriminator(&zero, &zero).unwrap() as f64;

    let mut h_d = Tensor::zeros(&[4, 50]);
    let mut h_t = Tensor::zeros(&[4, 50]);
    for i in 0..4 {
        for k in 0..50 {
            let v = (i * 50 + k) as f32 * 0.01 + 0.1;
            if k % 2 == 0 {
                h_d.data_mut()[i * 50 + k] = v;
            } else {
                h_t.data_mut()[i * 50 + k] = -v;
            }
        }
    }
    let lm = value::mutual(&h_d, &h_t).unwrap();
    let x = Tensor::uniform(&[3, 1, 28, 28], 0.0, 1.0, &mut rng);
    let lr = value::reconstruction(&x, &x).unwrap();

    let ce_ok = (ce - 10f64.ln()).abs() <= CE_TOL;
    let adv_ok = (adv - 2.0 * 2f64.ln()).abs() <= ADV_TOL;
    rep.check(
        2,
        "loss identities",
        ce_ok && adv_ok && lm == 0.0 && lr == 0.0,
        &format!(
            "uniform CE {ce:.7} vs ln 10 {:.7}; chance L_adv_D {adv:.6} vs 2 ln 2 {:.6}; orthogonal L_m {lm}; identical L_r {lr}",
            10f64.ln(),
            2.0 * 2f64.ln()
        ),
    );
}

fn run_all(recipe: &Recipe, out: &Path, root: Option<&Path>) -> (ResultRecord, Vec<SeedRun>) {
    let start = Instant::now();
    let runs: Vec<SeedRun> = recipe
        .seeds
        .iter()
        .map(|&s| run_seed(recipe, s, out, root).expect("recipe runs"))
        .collect();
    (summarize(recipe, &runs, start.elapsed().as_secs_f64()), runs)
}

fn accuracies(r: &ResultRecord) -> String {
    format!(
        "adapted {:.4} ± {:.4} {:?}, baseline {:.4} {:?}, {:.0}s",
        r.mean,
        r.std.unwrap_or(f64::NAN),
        r.adapted,
        r.baseline_mean,
        r.baseline,
        r.runtime_secs
    )
}

struct Ctx {
    out: PathBuf,
    root: Option<PathBuf>,
    invariants: Vec<(String, bool)>,
}

impl Ctx {
    fn have(&self, datasets: &[&str]) -> bool {
        datasets.iter().all(|d| idx_available(self.root.as_deref(), d))
    }

    fn run(&mut self, recipe: &Recipe) -> (ResultRecord, Vec<SeedRun>) {
        let (rec, runs) = run_all(recipe, &self.out, self.root.as_deref());
        for r in &runs {
            let inv = &r.adaptation.invariants;
            self.invariants.push((
                format!("{}/{}", recipe.name, r.seed),
                inv.source_unchanged() && inv.target_started_from_source(),
            ));
        }
        (rec, runs)
    }
}

fn blocked(rep: &mut Report, id: usize, title: &str, datasets: &[&str]) {
    rep.line(
        id,
        title,
        Status::Blocked,
        &format!("needs IDX files for {datasets:?} under ${}", fan_core::experiments::DATA_ROOT_ENV),
    );
}

fn digit_benchmarks(rep: &mut Report, ctx: &mut Ctx) -> Option<SeedRun> {
    for (id, name, title, min_acc, min_gain) in [
        (3, "mnist-usps-sampled", "MNIST->USPS sampled", 0.89, 0.10),
        (4, "usps-mnist-sampled", "USPS->MNIST sampled", 0.85, 0.15),
    ] {
        if !ctx.have(&["mnist", "usps"]) {
            blocked(rep, id, title, &["mnist", "usps"]);
            continue;
        }
        let (r, _) = ctx.run(&Recipe::builtin(name).unwrap());
        let ok = r.mean >= min_acc && r.mean >= r.baseline_mean + min_gain;
        rep.check(id, title, ok, &format!("{}; need >= {min_acc} and baseline + {min_gain}", accuracies(&r)));
    }

    let title = "full-set MNIST<->USPS";
    if !ctx.have(&["mnist", "usps"]) {
        blocked(rep, 5, title, &["mnist", "usps"]);
    } else if std::env::var_os("FAN_EXTENDED").is_none() {
        rep.line(5, title, Status::Skipped, "extended tier; set FAN_EXTENDED=1");
    } else {
        let (a, _) = ctx.run(&Recipe::builtin("mnist-usps-full").unwrap());
        let (b, _) = ctx.run(&Recipe::builtin("usps-mnist-full").unwrap());
        let ok = a.mean >= 0.93 && b.mean >= 0.93;
        rep.check(5, title, ok, &format!("M->U {}; U->M {}; need >= 0.93", accuracies(&a), accuracies(&b)));
    }

    let title = "SVHN->MNIST 10k subset";
    if !ctx.have(&["svhn", "mnist"]) {
        blocked(rep, 6, title, &["svhn", "mnist"]);
        return None;
    }
    let (r, mut runs) = ctx.run(&Recipe::builtin("svhn-mnist-subset").unwrap());
    rep.check(
        6,
        title,
        r.mean >= r.baseline_mean + 0.10,
        &format!("{}; need baseline + 0.10", accuracies(&r)),
    );
    Some(runs.swap_remove(0))
}

/// `full ≥ concatenation − 0.01`, `concatenation ≥ separation − 0.02`,
/// `separation ≥ joint − 0.02` on per-variant means.
fn ordered(means: &[f64; 4]) -> bool {
    let [joint, sep, conc, full] = *means;
    full >= conc - ABLATION_SLACK[0] && conc >= sep - ABLATION_SLACK[1] && sep >= joint - ABLATION_SLACK[2]
}

fn ablation(rep: &mut Report, ctx: &mut Ctx) -> Vec<SeedRun> {
    let mut keep = Vec::new();
    let mut pairs = vec!["synth-invert"];
    if ctx.have(&["svhn", "mnist"]) {
        pairs.push("svhn-mnist-subset");
    }
    let mut details = Vec::new();
    let mut all_ok = true;
    for base in pairs {
        let mut means = [0.0; 4];
        for (i, r) in ablation_recipes(&Recipe::builtin(base).unwrap()).iter().enumerate() {
            let (rec, mut runs) = ctx.run(r);
            means[i] = rec.mean;
            if base == "synth-invert" && r.model.variant == Variant::Full {
                keep.push(runs.swap_remove(0));
            }
        }
        let ok = ordered(&means);
        all_ok &= ok;
        details.push(format!(
            "{base}: joint {:.4}, separation {:.4}, concatenation {:.4}, full {:.4} -> {}",
            means[0],
            means[1],
            means[2],
            means[3],
            if ok { "ordered" } else { "not ordered" }
        ));
        if means.iter().all(|&m| m <= CHANCE) {
            details.push(format!("{base}: every variant at or below chance, ordering carries no signal"));
        }
    }
    rep.check(7, "ablation ordering", all_ok, &details.join("; "));
    keep
}

fn invariants(rep: &mut Report, ctx: &Ctx) {
    let broken: Vec<&str> = ctx.invariants.iter().filter(|(_, ok)| !ok).map(|(n, _)| n.as_str()).collect();
    rep.check(
        8,
        "frozen-source and initialization invariants",
        !ctx.invariants.is_empty() && broken.is_empty(),
        &format!("{} adapt runs hashed, violations {broken:?}", ctx.invariants.len()),
    );
}

fn logit_swap(rep: &mut Report, run: Option<&SeedRun>, proxy: Option<&SeedRun>) {
    let measure = |r: &SeedRun| {
        let n = r.target.test.len().min(500);
        let x = r.target.test.images().slice_rows(0, n).unwrap();
        let (ms, mt) = (&r.source_model, &r.adaptation.model);
        let own = export_reconstructions(mt, ms, &x, &r.source.test, ReconMode::SelfMode, 9).unwrap();
        let swap = export_reconstructions(mt, ms, &x, &r.source.test, ReconMode::LogitSwap, 9).unwrap();
        (
            own.pixel_error().unwrap(),
            swap.pixel_error().unwrap(),
            swap.class_retention(ms).unwrap(),
        )
    };
    let title = "logit-swap reconstruction";
    match run {
        Some(r) => {
            let (e_self, e_swap, kept) = measure(r);
            rep.check(
                9,
                title,
                e_self < e_swap && kept >= RETENTION_MIN,
                &format!("self error {e_self:.5}, swap error {e_swap:.5}, swap retention {kept:.3} (need >= {RETENTION_MIN})"),
            );
        }
        None => {
            blocked(rep, 9, title, &["svhn", "mnist"]);
            if let Some(p) = proxy {
                let (e_self, e_swap, kept) = measure(p);
                rep.note(&format!(
                    "informational, synthetic invert pair: self error {e_self:.5}, swap error {e_swap:.5}, swap retention {kept:.3}"
                ));
            }
        }
    }
}

fn determinism(rep: &mut Report, ctx: &Ctx, reference: &SeedRun) {
    let base = Recipe::builtin("synth-invert").unwrap();
    let recipe = ablation_recipes(&base).into_iter().find(|r| r.model.variant == Variant::Full).unwrap();
    let other = tempfile::tempdir().unwrap();
    let again = run_seed(&recipe, reference.seed, other.path(), ctx.root.as_deref()).unwrap();
    let same_acc = again.adapted.to_bits() == reference.adapted.to_bits()
        && again.baseline.to_bits() == reference.baseline.to_bits()
        && again.source_accuracy.to_bits() == reference.source_accuracy.to_bits();
    let same_params = fingerprint(again.adaptation.model.store()) == fingerprint(reference.adaptation.model.store());
    let frozen_a = std::fs::read_to_string(reference.dir.join("config.toml")).unwrap();
    let frozen_b = std::fs::read_to_string(again.dir.join("config.toml")).unwrap();
    let same_config = frozen_a == frozen_b;
    rep.check(
        10,
        "determinism",
        same_acc && same_params && same_config,
        &format!(
            "{} seed {} rerun: adapted {} vs {}, baseline {} vs {}, parameter hashes {}, frozen configs {}",
            recipe.name,
            reference.seed,
            reference.adapted,
            again.adapted,
            reference.baseline,
            again.baseline,
            if same_params { "equal" } else { "differ" },
            if same_config { "equal" } else { "differ" }
        ),
    );
}

#[test]
fn acceptance_criteria() {
    let mut rep = Report { failures: Vec::new() };
    gradient_suite(&mut rep);
    loss_identities(&mut rep);

    let dir = tempfile::tempdir().unwrap();
    let mut ctx = Ctx {
        out: dir.path().to_path_buf(),
        root: data_root(None),
        invariants: Vec::new(),
    };
    let svhn_run = digit_benchmarks(&mut rep, &mut ctx);
    let full_runs = ablation(&mut rep, &mut ctx);
    invariants(&mut rep, &ctx);
    logit_swap(&mut rep, svhn_run.as_ref(), full_runs.first());
    determinism(&mut rep, &ctx, &full_runs[0]);

    assert!(rep.failures.is_empty(), "failed criteria: {:?}", rep.failures);
}
