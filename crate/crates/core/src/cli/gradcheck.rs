//! Gradient-check suite over every op and module, with a negative control
//! whose backward rule has the wrong sign.

use std::time::Instant;

use serde::Serialize;

use crate::detect::{match_anchors, BBox, NEG_RATIO};
use crate::nn::{AttentionConfig, DeformMode, PhasewiseDeform, SelfAttention};
use crate::tensor::gradcheck::{gradcheck, random_tensor};
use crate::tensor::{Conv2dConfig, DeformConfig, Function, Graph, ParamStore, Tensor, Var};

pub const TOLERANCE: f64 = 1e-4;
pub const EPS: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub op: String,
    pub max_rel_error: f64,
    /// For the negative control, passing means the error was detected.
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckTable {
    pub rows: Vec<GradcheckRow>,
    pub seconds: f64,
}

impl GradcheckTable {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn max_error(&self) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.op != NEGATIVE_CONTROL)
            .fold(0.0, |m, r| m.max(r.max_rel_error))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("op,max_rel_error,pass\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:e},{}\n", r.op, r.max_rel_error, r.pass));
        }
        out
    }
}

const NEGATIVE_CONTROL: &str = "negative_control";

/// `y = x^2` with the gradient sign flipped.
struct WrongSquare;

impl Function<f64> for WrongSquare {
    fn name(&self) -> &'static str {
        "wrong_square"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<f64>],
        _: &Tensor<f64>,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0].data();
        vec![needs[0].then(|| x.iter().zip(grad).map(|(&x, &g)| -2.0 * x * g).collect())]
    }
}

fn wrong_square(g: &mut Graph<f64>, x: Var) -> Var {
    let v = g.value(x).map(|a| a * a);
    g.record(WrongSquare, &[x], v)
}

fn module_inputs(x: Tensor<f64>, store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    let mut v = vec![x];
    v.extend(store.iter().map(|p| p.value.clone()));
    v
}

fn randomized(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut i = 0;
    for p in store.iter_mut() {
        let r = random_tensor::<f64>(p.value.shape(), seed + i);
        p.value = r.map(|v| v * scale);
        i += 1;
    }
}

/// Runs every check. `inject_fault` adds the wrong-sign op to the real suite
/// so that it must fail.
pub fn run_suite(inject_fault: bool) -> GradcheckTable {
    let start = Instant::now();
    let t = random_tensor::<f64>;
    let mut rows: Vec<(String, f64)> = Vec::new();
    let mut check = |name: &str, err: f64| rows.push((name.to_string(), err));

    check(
        "add",
        gradcheck(&[t(&[2, 3], 1), t(&[2, 3], 2)], EPS, |g, v| {
            g.add(v[0], v[1]).unwrap()
        }),
    );
    check(
        "mul",
        gradcheck(&[t(&[2, 3], 3), t(&[2, 3], 4)], EPS, |g, v| {
            g.mul(v[0], v[1]).unwrap()
        }),
    );
    check(
        "mul_scalar",
        gradcheck(&[t(&[2, 3], 5), t(&[1], 6)], EPS, |g, v| {
            g.mul_scalar(v[0], v[1]).unwrap()
        }),
    );
    check(
        "scale",
        gradcheck(&[t(&[4], 7)], EPS, |g, v| g.scale(v[0], -1.7)),
    );
    // Keep inputs away from the kink.
    let away = t(&[3, 4], 8).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    check("relu", gradcheck(&[away], EPS, |g, v| g.relu(v[0])));
    check("sum", gradcheck(&[t(&[3, 2], 9)], EPS, |g, v| g.sum(v[0])));
    check(
        "reshape",
        gradcheck(&[t(&[2, 6], 10)], EPS, |g, v| {
            g.reshape(v[0], [3, 4]).unwrap()
        }),
    );
    check(
        "permute",
        gradcheck(&[t(&[2, 3, 4], 11)], EPS, |g, v| {
            g.permute(v[0], &[2, 0, 1]).unwrap()
        }),
    );
    check(
        "concat",
        gradcheck(&[t(&[2, 2, 3], 12), t(&[2, 1, 3], 13)], EPS, |g, v| {
            g.concat(&[v[0], v[1]], 1).unwrap()
        }),
    );
    check(
        "matmul",
        gradcheck(&[t(&[3, 4], 14), t(&[4, 2], 15)], EPS, |g, v| {
            g.matmul(v[0], v[1]).unwrap()
        }),
    );
    check(
        "bmm",
        gradcheck(&[t(&[2, 4, 3], 16), t(&[2, 4, 5], 17)], EPS, |g, v| {
            g.bmm(v[0], v[1], true, false).unwrap()
        }),
    );
    check(
        "bmm_trans_b",
        gradcheck(&[t(&[2, 3, 4], 18), t(&[2, 5, 4], 19)], EPS, |g, v| {
            g.bmm(v[0], v[1], false, true).unwrap()
        }),
    );
    check(
        "softmax",
        gradcheck(&[t(&[3, 5], 20).map(|v| 3.0 * v)], EPS, |g, v| {
            g.softmax(v[0], 1).unwrap()
        }),
    );
    check(
        "avg_pool2d",
        gradcheck(&[t(&[1, 2, 6, 6], 21)], EPS, |g, v| {
            g.avg_pool2d(v[0], 2).unwrap()
        }),
    );
    check(
        "conv2d",
        gradcheck(
            &[t(&[1, 4, 5, 5], 22), t(&[4, 2, 3, 3], 23), t(&[4], 24)],
            EPS,
            |g, v| {
                g.conv2d(
                    v[0],
                    v[1],
                    Some(v[2]),
                    Conv2dConfig::same3x3(2).with_stride(2),
                )
                .unwrap()
            },
        ),
    );
    let coords = t(&[6, 2], 25).map(|v| 2.0 + 1.7 * v + 0.013);
    check(
        "bilinear_sample",
        gradcheck(&[t(&[2, 5, 5], 26), coords], EPS, |g, v| {
            g.bilinear_sample(v[0], v[1]).unwrap()
        }),
    );
    let offsets = t(&[1, 2 * 9 * 2, 4, 4], 27).map(|v| 0.8 * v + 0.013);
    check(
        "deform_conv2d",
        gradcheck(
            &[
                t(&[1, 4, 4, 4], 28),
                offsets,
                t(&[4, 2, 3, 3], 29),
                t(&[4], 30),
            ],
            EPS,
            |g, v| {
                g.deform_conv2d(v[0], v[1], v[2], Some(v[3]), DeformConfig::same3x3(2))
                    .unwrap()
            },
        ),
    );

    let anchors: Vec<BBox> = (0..12)
        .map(|i| {
            BBox::new(
                4.0 + 8.0 * (i % 4) as f64,
                4.0 + 8.0 * (i / 4) as f64,
                8.0,
                8.0,
            )
        })
        .collect();
    let matches = vec![
        match_anchors(&anchors, &[BBox::new(13.0, 5.0, 9.0, 7.0)], 0.5, 0.4).expect("thresholds"),
        match_anchors(&anchors, &[], 0.5, 0.4).expect("thresholds"),
    ];
    check(
        "multibox_loss",
        gradcheck(
            &[
                t(&[2, 12, 2], 31).map(|v| 2.0 * v),
                t(&[2, 12, 4], 32).map(|v| 3.0 * v),
            ],
            EPS,
            |g, v| {
                g.multibox_loss(v[0], v[1], &matches, NEG_RATIO)
                    .unwrap()
                    .total
            },
        ),
    );

    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(33);
    for (name, pool, groups) in [
        ("self_attention", 1, 1),
        ("self_attention_pooled", 2, 1),
        ("self_attention_per_phase", 1, 2),
    ] {
        let mut store = ParamStore::<f64>::new();
        let sa = SelfAttention::build(
            &mut store,
            &mut rng,
            "sa",
            AttentionConfig::new(16, pool).expect("config"),
            groups,
        )
        .expect("block");
        randomized(&mut store, 34, 0.4);
        let inputs = module_inputs(t(&[1, 16, 4, 4], 35), &store);
        check(
            name,
            gradcheck(&inputs, EPS, |g, v| sa.forward(g, &v[1..], v[0]).unwrap().0),
        );
    }
    // The residual gate alone.
    {
        let mut store = ParamStore::<f64>::new();
        let sa = SelfAttention::build(
            &mut store,
            &mut rng,
            "sa",
            AttentionConfig::new(16, 1).expect("config"),
            1,
        )
        .expect("block");
        randomized(&mut store, 36, 0.4);
        let x = t(&[1, 16, 4, 4], 37);
        let sigma = store
            .iter()
            .position(|p| p.name.ends_with(".sigma"))
            .expect("sigma");
        let fixed: Vec<Tensor<f64>> = store.iter().map(|p| p.value.clone()).collect();
        check(
            "sigma_gate",
            gradcheck(&[fixed[sigma].clone()], EPS, |g, v| {
                let mut p: Vec<Var> = fixed.iter().map(|f| g.constant(f.clone())).collect();
                p[sigma] = v[0];
                let xv = g.constant(x.clone());
                sa.forward(g, &p, xv).unwrap().0
            }),
        );
    }
    for (name, mode) in [
        ("phasewise_deform", DeformMode::Phasewise),
        ("shared_deform", DeformMode::Shared),
    ] {
        let mut store = ParamStore::<f64>::new();
        let dc =
            PhasewiseDeform::build(&mut store, &mut rng, "dc", 8, 8, 8, 4, mode).expect("module");
        randomized(&mut store, 38, 0.15);
        let mut inputs = vec![t(&[1, 8, 4, 4], 39)];
        inputs.extend(module_inputs(t(&[1, 8, 4, 4], 40), &store));
        check(
            name,
            gradcheck(&inputs, EPS, |g, v| {
                dc.forward(g, &v[2..], v[0], v[1]).unwrap().y
            }),
        );
    }

    if inject_fault {
        check(
            "injected_fault",
            gradcheck(&[t(&[5], 41)], EPS, wrong_square_op),
        );
    }
    let control = gradcheck(&[t(&[5], 42)], EPS, wrong_square_op);

    let mut out: Vec<GradcheckRow> = rows
        .into_iter()
        .map(|(op, e)| GradcheckRow {
            pass: e < TOLERANCE,
            op,
            max_rel_error: e,
        })
        .collect();
    out.push(GradcheckRow {
        op: NEGATIVE_CONTROL.into(),
        max_rel_error: control,
        pass: control >= TOLERANCE,
    });
    GradcheckTable {
        rows: out,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn wrong_square_op(g: &mut Graph<f64>, v: &[Var]) -> Var {
    wrong_square(g, v[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_control_fires() {
        let table = run_suite(false);
        for r in &table.rows {
            assert!(r.pass, "{r:?}");
        }
        let control = table.rows.last().unwrap();
        assert_eq!(control.op, NEGATIVE_CONTROL);
        assert!(control.max_rel_error > 0.5);
        assert!(table.max_error() < TOLERANCE);
    }

    #[test]
    fn injected_fault_fails() {
        let table = run_suite(true);
        assert!(!table.all_pass());
        let bad: Vec<_> = table
            .rows
            .iter()
            .filter(|r| !r.pass)
            .map(|r| r.op.as_str())
            .collect();
        assert_eq!(bad, ["injected_fault"]);
    }
}
