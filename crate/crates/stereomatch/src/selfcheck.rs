//! Built-in verification suite: independent oracles and finite-difference
//! gradient checks, runnable from the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::correlation::{build_pyramid, build_volume, lookup, prepare_on_the_fly, LookupConfig};
use crate::tensor::gradcheck::builtin_op_checks;
use crate::tensor::{ops, Tensor};
use crate::update::convex_upsample;

pub struct CheckResult {
    pub name: String,
    pub detail: Result<String, String>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.detail.is_ok()
    }
}

fn check(name: &str, f: impl FnOnce() -> Result<String, String>) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        detail: f(),
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Run every check; results carry a human-readable detail line.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    out.push(check("matmul vs triple-loop oracle", || {
        let (m, k, n) = (24, 18, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let a = rand_vec(&mut rng, m * k);
        let b = rand_vec(&mut rng, k * n);
        let at = Tensor::from_vec(a.clone(), &[m, k]).map_err(|e| e.to_string())?;
        let bt = Tensor::from_vec(b.clone(), &[k, n]).map_err(|e| e.to_string())?;
        let c = ops::matmul(&at, &bt).map_err(|e| e.to_string())?;
        let mut worst = 0.0f32;
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f32;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                worst = worst.max((acc - c.data()[i * n + j]).abs());
            }
        }
        if worst < 1e-5 {
            Ok(format!("max abs diff {worst:.2e}"))
        } else {
            Err(format!("max abs diff {worst:.2e} exceeds 1e-5"))
        }
    }));

    out.push(check("correlation volume vs triple-loop oracle", || {
        let (d, h, w) = (8, 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(102);
        let f = rand_vec(&mut rng, d * h * w);
        let g = rand_vec(&mut rng, d * h * w);
        let ft = Tensor::from_vec(f.clone(), &[d, h, w]).map_err(|e| e.to_string())?;
        let gt = Tensor::from_vec(g.clone(), &[d, h, w]).map_err(|e| e.to_string())?;
        let vol = build_volume(&ft, &gt, true).map_err(|e| e.to_string())?;
        let scale = 1.0 / (d as f32).sqrt();
        let mut worst = 0.0f32;
        for i in 0..h {
            for j in 0..w {
                for kk in 0..w {
                    let mut acc = 0.0f32;
                    for ch in 0..d {
                        acc += f[ch * h * w + i * w + j] * g[ch * h * w + i * w + kk];
                    }
                    worst = worst
                        .max((acc * scale - vol.data()[i * w * w + j * w + kk]).abs());
                }
            }
        }
        if worst < 1e-5 {
            Ok(format!("max abs diff {worst:.2e}"))
        } else {
            Err(format!("max abs diff {worst:.2e} exceeds 1e-5"))
        }
    }));

    out.push(check("pyramid pooling is exact pairwise mean", || {
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        let vol = Tensor::from_vec(rand_vec(&mut rng, 3 * 4 * 16), &[3, 4, 16])
            .map_err(|e| e.to_string())?;
        let pyr = build_pyramid(&vol, 4).map_err(|e| e.to_string())?;
        for k in 1..4 {
            let prev = &pyr.levels[k - 1];
            let cur = &pyr.levels[k];
            let l = *prev.shape().last().unwrap();
            let lo = *cur.shape().last().unwrap();
            for row in 0..cur.len() / lo {
                for i in 0..lo {
                    let a = prev.data()[row * l + 2 * i];
                    let b = prev.data()[row * l + (2 * i + 1).min(l - 1)];
                    let want = 0.5 * (a + b);
                    if (cur.data()[row * lo + i] - want).abs() > 0.0 {
                        return Err(format!("level {k} not an exact pairwise mean"));
                    }
                }
            }
        }
        Ok("4 levels exact".to_string())
    }));

    out.push(check("lookup endpoints: integer, midpoint, padding", || {
        let row = Tensor::from_vec(vec![0.0f32, 2.0, 4.0, 6.0], &[4]).map_err(|e| e.to_string())?;
        let cases = [(2.0f32, 4.0f32), (0.5, 1.0), (-1.0, 0.0), (4.0, 0.0), (3.5, 3.0)];
        for (x, want) in cases {
            let got = ops::bilinear_sample_1d(&row, &Tensor::scalar(x))
                .map_err(|e| e.to_string())?
                .item();
            if (got - want).abs() > 1e-6 {
                return Err(format!("sample at {x}: got {got}, want {want}"));
            }
        }
        Ok("5 cases exact".to_string())
    }));

    out.push(check("on-the-fly lookup matches precomputed", || {
        let (d, h, w) = (16, 8, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(104);
        let f = Tensor::from_vec(rand_vec(&mut rng, d * h * w), &[d, h, w])
            .map_err(|e| e.to_string())?;
        let g = Tensor::from_vec(rand_vec(&mut rng, d * h * w), &[d, h, w])
            .map_err(|e| e.to_string())?;
        let disp = Tensor::from_vec(
            (0..h * w).map(|_| rng.gen_range(-1.0..5.0)).collect(),
            &[1, h, w],
        )
        .map_err(|e| e.to_string())?;
        let cfg = LookupConfig::default();
        let pre = lookup(
            &build_pyramid(&build_volume(&f, &g, true).map_err(|e| e.to_string())?, 4)
                .map_err(|e| e.to_string())?,
            &disp,
            &cfg,
        )
        .map_err(|e| e.to_string())?;
        let otf = prepare_on_the_fly(&f, &g, &cfg)
            .map_err(|e| e.to_string())?
            .lookup(&disp)
            .map_err(|e| e.to_string())?;
        let worst = pre
            .iter()
            .zip(otf.iter())
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
        if worst < 1e-4 {
            Ok(format!("max abs diff {worst:.2e}"))
        } else {
            Err(format!("max abs diff {worst:.2e} exceeds 1e-4"))
        }
    }));

    out.push(check("softmax normalization", || {
        let mut rng = ChaCha8Rng::seed_from_u64(105);
        let x = Tensor::from_vec(rand_vec(&mut rng, 6 * 9), &[6, 9]).map_err(|e| e.to_string())?;
        let s = ops::softmax(&x, 1).map_err(|e| e.to_string())?;
        for r in 0..6 {
            let sum: f32 = s.data()[r * 9..(r + 1) * 9].iter().sum();
            if (sum - 1.0).abs() > 1e-6 || s.data()[r * 9..(r + 1) * 9].iter().any(|v| *v < 0.0) {
                return Err(format!("row {r} sums to {sum}"));
            }
        }
        Ok("rows sum to 1 +/- 1e-6".to_string())
    }));

    out.push(check("convex upsample: constant field and weight sums", || {
        let mut rng = ChaCha8Rng::seed_from_u64(106);
        let s = 8usize;
        let disp = Tensor::full(&[1, 3, 4], 2.0f32);
        let mask = Tensor::from_vec(rand_vec(&mut rng, s * s * 9 * 12), &[s * s * 9, 3, 4])
            .map_err(|e| e.to_string())?;
        let up = convex_upsample(&disp, &mask, s).map_err(|e| e.to_string())?;
        let worst = up
            .iter()
            .fold(0.0f32, |m, v| m.max((v - 2.0 * s as f32).abs()));
        if worst < 1e-4 {
            Ok(format!("constant maps to s*c, max dev {worst:.2e}"))
        } else {
            Err(format!("constant-field deviation {worst:.2e}"))
        }
    }));

    out.push(check("gradients vs central finite differences (f64)", || {
        let mut worst = 0.0f64;
        for c in builtin_op_checks() {
            let report = c.run(&mut rng).map_err(|e| format!("{}: {e}", c.name))?;
            if !report.pass() {
                return Err(format!(
                    "{}: {} mismatches, max rel err {:.2e}",
                    c.name,
                    report.failures.len(),
                    report.max_rel_err
                ));
            }
            worst = worst.max(report.max_rel_err);
        }
        Ok(format!("all ops, max rel err {worst:.2e}"))
    }));

    out.push(check("pfm round trip in memory", || {
        let field = Tensor::from_vec(vec![1.5f32, -2.0, 0.25, 1e-6, 3.0, -7.5], &[2, 3])
            .map_err(|e| e.to_string())?;
        let mut buf = Vec::new();
        crate::io::pfm::write_pfm_to(&mut buf, &field).map_err(|e| e.to_string())?;
        let (back, _) =
            crate::io::pfm::read_pfm_from(buf.as_slice(), "mem").map_err(|e| e.to_string())?;
        if back
            .iter()
            .zip(field.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits())
        {
            Ok("bit-exact".to_string())
        } else {
            Err("round trip not bit-exact".to_string())
        }
    }));

    out.push(check("sequence loss hand value", || {
        let gt = Tensor::full(&[1, 2, 2], 1.0f32);
        let pred = Tensor::full(&[1, 2, 2], 2.0f32);
        let mask = Tensor::full(&[1, 2, 2], 1.0f32);
        let preds = vec![pred.clone(), pred.clone(), pred];
        let loss = crate::training::sequence_loss(&preds, &gt, &mask, 0.9)
            .map_err(|e| e.to_string())?
            .item();
        if (loss - 2.71).abs() < 1e-5 {
            Ok(format!("loss {loss:.5} == 2.71"))
        } else {
            Err(format!("loss {loss} != 2.71"))
        }
    }));

    out
}
