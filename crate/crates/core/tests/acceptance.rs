//! Acceptance criteria, one PASS/FAIL line each. Run with
//! `cargo test -p hydrolimit --test acceptance`; exits non-zero if any criterion fails.

use std::f64::consts::PI;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use gauss_quad::hermite::GaussHermite;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use hydrolimit::collision::{normalize_mu, CollisionKernel, CollisionOperator, KernelSpec};
use hydrolimit::config::Config;
use hydrolimit::harness::{self, Outcome};
use hydrolimit::linearized::{ab_fields, assemble_l, SolverOptions};
use hydrolimit::velocity_space::{dot, gaussian_tail, sphere_area, GridSpec, VelocityGrid};

type Res<T> = Result<T, Box<dyn std::error::Error>>;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new() -> Self {
        Verdict {
            pass: true,
            detail: String::new(),
        }
    }

    fn check(&mut self, name: &str, ok: bool, value: impl std::fmt::Display) {
        if !self.detail.is_empty() {
            self.detail.push_str("; ");
        }
        self.detail
            .push_str(&format!("{name}={value}{}", if ok { "" } else { " [fail]" }));
        self.pass &= ok;
    }

    /// Fold in the command's own predicates.
    fn outcome(&mut self, tag: &str, o: &Outcome) {
        let failed: Vec<&str> = o.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
        self.check(
            &format!("{tag}.checks"),
            failed.is_empty(),
            if failed.is_empty() {
                format!("{} ok", o.checks.len())
            } else {
                failed.join(",")
            },
        );
    }
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn config(name: &str) -> Res<Config> {
    Ok(Config::load(&root().join("configs").join(name))?)
}

fn report(dir: &Path) -> Res<serde_json::Value> {
    Ok(serde_json::from_str(&std::fs::read_to_string(dir.join("report.json"))?)?)
}

fn num(v: &serde_json::Value, path: &[&str]) -> f64 {
    let mut v = v;
    for p in path {
        v = match p.parse::<usize>() {
            Ok(i) => &v[i],
            Err(_) => &v[p],
        };
    }
    v.as_f64().unwrap_or(f64::NAN)
}

/// Every command of the run, writing under `base`; used twice for reproducibility.
fn run_commands(base: &Path, snapshot: Option<&Path>) -> Res<Vec<(String, Outcome, f64)>> {
    let mut out = Vec::new();
    let jobs: [(&str, &str, fn(&Config, &Path) -> hydrolimit::Result<Outcome>); 7] = [
        ("spectrum_hs12", "spectrum_hs12.toml", harness::cmd_spectrum),
        ("transport_hs12", "transport_hs12.toml", harness::cmd_transport_coeffs),
        ("transport_bgk_a1", "transport_bgk_a1.toml", harness::cmd_transport_coeffs),
        ("transport_bgk_a2_5", "transport_bgk_a2_5.toml", harness::cmd_transport_coeffs),
        ("relaxation_0d", "relaxation_0d.toml", harness::cmd_simulate),
        ("nsf_tg64", "nsf_tg64.toml", harness::cmd_nsf),
        ("sweep", "sweep.toml", harness::cmd_sweep),
    ];
    for (tag, file, cmd) in jobs {
        let c = config(file)?;
        let t0 = Instant::now();
        let o = cmd(&c, &base.join(tag))?;
        out.push((tag.to_string(), o, t0.elapsed().as_secs_f64()));
    }
    // diagnose always reads the first run's snapshot so the reports name the same file
    let snap = snapshot
        .map(Path::to_path_buf)
        .unwrap_or_else(|| base.join("relaxation_0d/state_final.hlsnap"));
    let mut c = config("relaxation_0d.toml")?;
    c.snapshot = Some(snap);
    let t0 = Instant::now();
    let o = harness::cmd_diagnose(&c, &base.join("diagnose"))?;
    out.push(("diagnose".into(), o, t0.elapsed().as_secs_f64()));
    Ok(out)
}

fn find<'a>(runs: &'a [(String, Outcome, f64)], tag: &str) -> &'a (String, Outcome, f64) {
    runs.iter().find(|r| r.0 == tag).expect("job ran")
}

// --- 1: kernel and spectrum of L -------------------------------------------------

fn criterion_1(runs: &[(String, Outcome, f64)], base: &Path) -> Res<Verdict> {
    let mut v = Verdict::new();
    v.outcome("spectrum_hs12", &find(runs, "spectrum_hs12").1);
    let r = report(&base.join("spectrum_hs12"))?;
    let res = &r["results"];
    let kr = num(res, &["kernel_residual"]);
    v.check("kernel_residual", kr <= 1e-8, format!("{kr:.3e}"));
    let lam6 = num(res, &["eigenvalues", "5"]);
    v.check("lambda_6", lam6 > 0.0, format!("{lam6:.6}"));
    let sym = num(res, &["symmetry_defect"]);
    v.check("symmetry", sym <= 1e-10, format!("{sym:.3e}"));
    let lmin = num(res, &["min_eigenvalue"]);
    v.check("min_eig", lmin >= -1e-10, format!("{lmin:.3e}"));

    let t0 = Instant::now();
    let grid = Arc::new(VelocityGrid::new(&GridSpec::uniform(16, 6.0))?);
    let op = CollisionOperator::new(&KernelSpec::hard_sphere(), grid)?;
    let q = op.qkerl_defect();
    let secs = t0.elapsed().as_secs_f64();
    v.check("qkerl_nv16", q <= 1e-3, format!("{q:.3e}"));
    v.check("qkerl_seconds", secs < 60.0, format!("{secs:.1}"));
    Ok(v)
}

// --- 2: constant-frequency closed forms ---------------------------------------------

/// ⟨A:A⟩ and ⟨B·B⟩ from a tensor Gauss–Hermite rule built straight from gauss-quad.
fn gh_oracle(n: usize) -> (f64, f64) {
    let rule = GaussHermite::new(NonZeroUsize::new(n).expect("n > 0"));
    let pts: Vec<(f64, f64)> = rule.iter().map(|(x, w)| (x * 2f64.sqrt(), w / PI.sqrt())).collect();
    let (mut aa, mut bb) = (0.0, 0.0);
    for &(x, wx) in &pts {
        for &(y, wy) in &pts {
            for &(z, wz) in &pts {
                let w = wx * wy * wz;
                let v = [x, y, z];
                let s = dot(v, v);
                let mut a2 = 0.0;
                for a in 0..3 {
                    for b in 0..3 {
                        let e = v[a] * v[b] - if a == b { s / 3.0 } else { 0.0 };
                        a2 += e * e;
                    }
                }
                aa += w * a2;
                bb += w * 0.25 * (s - 5.0).powi(2) * s;
            }
        }
    }
    (aa, bb)
}

fn criterion_2(runs: &[(String, Outcome, f64)]) -> Res<Verdict> {
    let mut v = Verdict::new();
    let (oa, ob) = gh_oracle(8);
    v.check("oracle_AA", (oa - 10.0).abs() <= 1e-10, format!("{oa:.12}"));
    v.check("oracle_BB", (ob - 7.5).abs() <= 1e-10, format!("{ob:.12}"));
    for (tag, a) in [("transport_bgk_a1", 1.0), ("transport_bgk_a2_5", 2.5)] {
        v.outcome(tag, &find(runs, tag).1);
        let grid = Arc::new(VelocityGrid::new(&GridSpec::gauss_hermite(8))?);
        let op = CollisionOperator::new(&KernelSpec::constant_frequency(a), grid.clone())?;
        let l = assemble_l(&op)?;
        let sol = l.fredholm(&SolverOptions::default())?;
        let (ac, bc) = ab_fields(&grid);
        let mut dev: f64 = 0.0;
        for (hat, raw) in sol.a_hat.iter().zip(&ac).chain(sol.b_hat.iter().zip(&bc)) {
            for (h, r) in hat.iter().zip(raw) {
                dev = dev.max((h - r / a).abs());
            }
        }
        v.check(&format!("a={a}:hat_minus_over_a"), dev <= 1e-8, format!("{dev:.3e}"));
        let mult = |p: usize| if p < 3 { 1.0 } else { 2.0 };
        let aa: f64 = (0..6).map(|p| mult(p) * grid.inner(&ac[p], &ac[p])).sum();
        let bb: f64 = (0..3).map(|k| grid.inner(&bc[k], &bc[k])).sum();
        v.check(&format!("a={a}:<A:A>"), (aa - oa).abs() <= 1e-8, format!("{aa:.12}"));
        v.check(&format!("a={a}:<B.B>"), (bb - ob).abs() <= 1e-8, format!("{bb:.12}"));
        let tc = l.transport_coefficients(&SolverOptions::default())?;
        let err = (tc.nu - 1.0 / a).abs().max((tc.kappa - 1.0 / a).abs());
        v.check(&format!("a={a}:nu_kappa_minus_inv_a"), err <= 1e-8, format!("{err:.3e}"));
    }
    Ok(v)
}

// --- 3: dual vs direct ----------------------------------------------------------------

fn criterion_3(runs: &[(String, Outcome, f64)], base: &Path) -> Res<Verdict> {
    let mut v = Verdict::new();
    v.outcome("transport_hs12", &find(runs, "transport_hs12").1);
    let r = report(&base.join("transport_hs12"))?;
    let res = &r["results"];
    for (p, d) in [("nu", "nu_dual"), ("kappa", "kappa_dual")] {
        let x = num(res, &[p]);
        let y = num(res, &[d]);
        let rel = ((x - y) / x).abs();
        v.check(&format!("{p}_rel"), rel <= 1e-6, format!("{rel:.3e}"));
    }
    Ok(v)
}

// --- 4: collision-measure normalization ---------------------------------------------------

fn criterion_4() -> Res<Verdict> {
    let mut v = Verdict::new();
    let exact = 8.0 * PI.sqrt();
    let k = CollisionKernel::new(&KernelSpec::hard_sphere())?;
    let mut errs = Vec::new();
    for n in [8, 12, 16, 24] {
        let grid = VelocityGrid::new(&GridSpec::uniform(n, 6.0))?;
        errs.push((normalize_mu(&k, &grid) / exact - 1.0).abs());
    }
    let monotone = errs.windows(2).all(|w| w[1] < w[0]);
    v.check(
        "rel_err_n8_12_16_24",
        monotone,
        errs.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>().join("/"),
    );
    let last = *errs.last().expect("nonempty");
    v.check("finest_within_0.5%", last <= 5e-3, format!("{last:.3e}"));

    // Monte Carlo: v, v₁ ~ M, ω uniform on S²; Z = |S²|·E|z·ω|
    let mut rng = ChaCha8Rng::seed_from_u64(20240601);
    let n = 10_000_000usize;
    let (mut s1, mut s2) = (0.0f64, 0.0f64);
    let mut g = || -> f64 { StandardNormal.sample(&mut rng) };
    for _ in 0..n {
        let z = [g() - g(), g() - g(), g() - g()];
        let w = [g(), g(), g()];
        let x = sphere_area(3) * dot(z, w).abs() / dot(w, w).sqrt();
        s1 += x;
        s2 += x * x;
    }
    let mean = s1 / n as f64;
    let sigma = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
    let dev = (mean - exact).abs() / sigma;
    v.check("mc_sigmas", dev <= 3.0, format!("{dev:.2}"));
    Ok(v)
}

// --- 5: space-homogeneous relaxation ---------------------------------------------------------

fn criterion_5(runs: &[(String, Outcome, f64)], base: &Path) -> Res<Verdict> {
    let mut v = Verdict::new();
    let (_, o, secs) = find(runs, "relaxation_0d");
    v.outcome("relaxation_0d", o);
    let r = report(&base.join("relaxation_0d"))?;
    let res = &r["results"];
    let h0 = num(res, &["h_initial"]);
    let defect = num(res, &["entropy_defect"]);
    v.check("entropy_defect/H0", defect <= 1e-3 * h0, format!("{:.3e}", defect / h0));
    v.check(
        "h_strictly_decreasing",
        res["h_strictly_decreasing"].as_bool() == Some(true),
        res["h_strictly_decreasing"].clone(),
    );
    let drift = num(res, &["max_invariant_drift"]);
    v.check("invariant_drift", drift <= 1e-8, format!("{drift:.3e}"));
    v.check("seconds", *secs < 600.0, format!("{secs:.0}"));
    Ok(v)
}

// --- 6: Gaussian tail asymptotics ----------------------------------------------------------------

/// ∫_{|z|²>R} |z|^p G_N dz by composite Simpson in s = |z|² over [R, R+200].
fn tail_oracle(p: usize, n: usize, r: f64) -> f64 {
    let a = (p + n) as f64 / 2.0 - 1.0;
    let pref = (2.0 * PI).powf(-(n as f64) / 2.0) * sphere_area(n);
    let m = 200_000;
    let h = 200.0 / m as f64;
    let f = |s: f64| s.powf(a) * (-0.5 * s).exp();
    let mut acc = f(r) + f(r + 200.0);
    for i in 1..m {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(r + i as f64 * h);
    }
    0.5 * pref * acc * h / 3.0
}

fn criterion_6() -> Res<Verdict> {
    let mut v = Verdict::new();
    for (n, p) in [(3usize, 0usize), (3, 2), (6, 2)] {
        let mut dist = Vec::new();
        for r in [20.0, 40.0, 60.0] {
            let (tail, asym) = gaussian_tail(p, n, r)?;
            let oracle = tail_oracle(p, n, r);
            let rel = (tail / oracle - 1.0).abs();
            v.check(&format!("N={n},p={p},R={r}:vs_simpson"), rel <= 1e-8, format!("{rel:.1e}"));
            dist.push((tail / asym - 1.0).abs());
        }
        let last = dist[2];
        v.check(&format!("N={n},p={p}:|ratio-1|@60"), last <= 0.1, format!("{last:.4}"));
        v.check(
            &format!("N={n},p={p}:monotone"),
            dist.windows(2).all(|w| w[1] < w[0]),
            format!("{:.4}/{:.4}/{:.4}", dist[0], dist[1], dist[2]),
        );
    }
    Ok(v)
}

// --- 7: NSF Taylor–Green ------------------------------------------------------------------

fn criterion_7(runs: &[(String, Outcome, f64)], base: &Path) -> Res<Verdict> {
    let mut v = Verdict::new();
    v.outcome("nsf_tg64", &find(runs, "nsf_tg64").1);
    let r = report(&base.join("nsf_tg64"))?;
    let nu = num(&r, &["results", "nu"]);
    let series = r["results"]["series"].as_array().cloned().unwrap_or_default();
    let e0 = num(&series[0], &["energy"]);
    let mut err: f64 = 0.0;
    let mut t_last: f64 = 0.0;
    for rec in &series {
        let t = num(rec, &["t"]);
        err = err.max((num(rec, &["energy"]) / e0 - (-4.0 * nu * t).exp()).abs());
        t_last = t;
    }
    v.check("max_energy_err", err <= 1e-4, format!("{err:.3e}"));
    v.check("covers_[0,1]", (t_last - 1.0).abs() < 1e-12, format!("{t_last}"));
    Ok(v)
}

// --- 8: ε-sweep -----------------------------------------------------------------------------

fn criterion_8(runs: &[(String, Outcome, f64)]) -> Res<Verdict> {
    let mut v = Verdict::new();
    let (_, o, secs) = find(runs, "sweep");
    for c in &o.checks {
        v.check(&c.name, c.pass, format!("{:.4}", c.value));
    }
    v.check("seconds", *secs <= 900.0, format!("{secs:.0}"));
    Ok(v)
}

// --- 9: reproducibility ----------------------------------------------------------------------

fn criterion_9(first: &[(String, Outcome, f64)], base1: &Path, base2: &Path) -> Res<Verdict> {
    let mut v = Verdict::new();
    let snap = base1.join("relaxation_0d/state_final.hlsnap");
    let second = run_commands(base2, Some(&snap))?;
    let mut compared = 0;
    let mut differing = Vec::new();
    for (tag, o, _) in first {
        let (_, o2, _) = find(&second, tag);
        for (f1, f2) in o.files.iter().zip(&o2.files) {
            compared += 1;
            if std::fs::read(f1)? != std::fs::read(f2)? {
                differing.push(f1.strip_prefix(base1).unwrap_or(f1).display().to_string());
            }
        }
        if o.files.len() != o2.files.len() {
            differing.push(format!("{tag}: file count"));
        }
    }
    // the snapshot is the one binary artifact not listed in `files`
    let s2 = base2.join("relaxation_0d/state_final.hlsnap");
    compared += 1;
    if std::fs::read(&snap)? != std::fs::read(&s2)? {
        differing.push("relaxation_0d/state_final.hlsnap".into());
    }
    v.check("files_compared", compared > 0, compared);
    v.check(
        "differing",
        differing.is_empty(),
        if differing.is_empty() {
            "none".to_string()
        } else {
            differing.join(",")
        },
    );
    Ok(v)
}

fn main() {
    let base = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let (b1, b2) = (base.join("run1"), base.join("run2"));
    let _ = std::fs::remove_dir_all(&base);

    let first = match run_commands(&b1, None) {
        Ok(r) => r,
        Err(e) => {
            println!("FAIL [setup] command run: {e}");
            std::process::exit(1);
        }
    };

    let criteria: Vec<(&str, Box<dyn Fn() -> Res<Verdict> + '_>)> = vec![
        ("1 Ker L is 5-dim, gap, symmetry, QKerL", Box::new(|| criterion_1(&first, &b1))),
        ("2 constant frequency closed forms", Box::new(|| criterion_2(&first))),
        ("3 dual vs direct transport coefficients", Box::new(|| criterion_3(&first, &b1))),
        ("4 collision-measure normalization Z", Box::new(criterion_4)),
        ("5 0-D relaxation entropy and invariants", Box::new(|| criterion_5(&first, &b1))),
        ("6 Gaussian tail asymptotics", Box::new(criterion_6)),
        ("7 NSF Taylor-Green energy decay", Box::new(|| criterion_7(&first, &b1))),
        ("8 epsilon-sweep convergence", Box::new(|| criterion_8(&first))),
        ("9 byte-identical reruns", Box::new(|| criterion_9(&first, &b1, &b2))),
    ];
    let mut all = true;
    for (name, f) in &criteria {
        let (pass, detail) = match f() {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        all &= pass;
        println!("{} [{name}] {detail}", if pass { "PASS" } else { "FAIL" });
    }
    if !all {
        std::process::exit(1);
    }
}
