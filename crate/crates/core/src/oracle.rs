//! Finite-difference checks over every differentiable op, layer kind and
//! loss, each on randomly drawn inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{block_target, record_block_term, HeadObjective, TeacherRoutes};
use crate::network::{build_network, LayerSpec, Network};
use crate::partition::Decomposition;
use crate::tensor::{finite_diff_check, GradCheckReport, Param, Tape, Tensor, Var};

pub const EPS: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: &'static str,
    pub seed: u64,
    pub report: GradCheckReport,
}

impl OpCheck {
    pub fn passes(&self) -> bool {
        self.report.passes(TOLERANCE)
    }
}

struct Draw(ChaCha8Rng);

impl Draw {
    fn uniform(&mut self, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| self.0.random_range(-1.0..1.0)).collect();
        if shape.is_empty() {
            return Tensor::scalar(v[0]);
        }
        Tensor::from_f64(shape, &v).expect("shape matches")
    }

    /// Values at least 0.05 away from zero, so no coordinate sits within a
    /// step of the relu kink.
    fn off_kink(&mut self, shape: &[usize]) -> Tensor<f64> {
        let mut t = self.uniform(shape);
        for v in t.data_mut() {
            *v = v.signum() * (0.05 + 0.95 * v.abs());
        }
        t
    }

    fn labels(&mut self, n: usize, classes: usize) -> Vec<usize> {
        (0..n).map(|_| self.0.random_range(0..classes)).collect()
    }

    fn param(&mut self, id: &str, shape: &[usize]) -> Param<f64> {
        Param::new(id, self.uniform(shape))
    }
}

/// `Σ out ⊙ R` for a fixed random `R`, turning any output into a scalar whose
/// gradient reaches every output coordinate.
fn probe(tape: &mut Tape<f64>, out: Var, r: &Tensor<f64>) -> Result<Var> {
    let r = tape.constant(r.clone());
    let m = tape.mul(out, r)?;
    Ok(tape.sum(m))
}

type Recorder = Box<dyn Fn(&mut Tape<f64>, &[Param<f64>]) -> Result<Var>>;

fn unary(
    draw: &mut Draw,
    shape: &[usize],
    out_shape: &[usize],
    op: impl Fn(&mut Tape<f64>, Var) -> Result<Var> + 'static,
) -> (Vec<Param<f64>>, Recorder) {
    let x = draw.param("x", shape);
    let r = draw.uniform(out_shape);
    let f: Recorder = Box::new(move |tape, ps| {
        let v = tape.param(&ps[0]);
        let out = op(tape, v)?;
        probe(tape, out, &r)
    });
    (vec![x], f)
}

fn binary(
    draw: &mut Draw,
    a: &[usize],
    b: &[usize],
    out_shape: &[usize],
    op: impl Fn(&mut Tape<f64>, Var, Var) -> Result<Var> + 'static,
) -> (Vec<Param<f64>>, Recorder) {
    let (pa, pb) = (draw.param("a", a), draw.param("b", b));
    let r = draw.uniform(out_shape);
    let f: Recorder = Box::new(move |tape, ps| {
        let (va, vb) = (tape.param(&ps[0]), tape.param(&ps[1]));
        let out = op(tape, va, vb)?;
        probe(tape, out, &r)
    });
    (vec![pa, pb], f)
}

fn network_case(
    draw: &mut Draw,
    net: Network<f64>,
    x: Tensor<f64>,
    loss: impl Fn(&mut Tape<f64>, Var) -> Result<Var> + 'static,
) -> (Vec<Param<f64>>, Recorder) {
    let mut net = net;
    for p in net.params_mut() {
        for v in p.tensor.data_mut() {
            *v += 0.1 * draw.0.random_range(-1.0..1.0);
        }
    }
    let params: Vec<Param<f64>> = net.params().cloned().collect();
    let f: Recorder = Box::new(move |tape, ps| {
        let mut n = net.clone();
        n.set_params(ps)?;
        let xv = tape.constant(x.clone());
        let out = n.record_range(tape, xv, 0..n.len())?;
        loss(tape, out)
    });
    (params, f)
}

fn conv(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> LayerSpec {
    LayerSpec::Conv2d { out_channels, kernel, stride, padding }
}

/// Names of the cases [`check_suite`] runs, in order.
pub const CASES: [&str; 24] = [
    "matmul",
    "add_row_bias",
    "add_channel_bias",
    "affine",
    "conv2d_s1p1",
    "conv2d_s2p0",
    "conv2d_s2p1_k2",
    "relu",
    "avgpool2d_w2",
    "avgpool2d_w3",
    "reshape",
    "flatten",
    "add",
    "mul",
    "scale",
    "sum",
    "mean",
    "cross_entropy",
    "kl_divergence_t1",
    "kl_divergence_t4",
    "mse",
    "network_all_layers",
    "vanilla_kd_loss",
    "stablekd_loss",
];

fn build_case(name: &str, draw: &mut Draw) -> Result<(Vec<Param<f64>>, Recorder)> {
    Ok(match name {
        "matmul" => binary(draw, &[3, 4], &[4, 5], &[3, 5], |t, a, b| t.matmul(a, b)),
        "add_row_bias" => binary(draw, &[3, 4], &[4], &[3, 4], |t, a, b| t.add_row_bias(a, b)),
        "add_channel_bias" => binary(draw, &[2, 3, 4, 4], &[3], &[2, 3, 4, 4], |t, a, b| t.add_channel_bias(a, b)),
        "affine" => {
            let (x, w, b) = (draw.param("x", &[3, 4]), draw.param("w", &[4, 2]), draw.param("b", &[2]));
            let r = draw.uniform(&[3, 2]);
            let f: Recorder = Box::new(move |tape, ps| {
                let (x, w, b) = (tape.param(&ps[0]), tape.param(&ps[1]), tape.param(&ps[2]));
                let out = tape.affine(x, w, b)?;
                probe(tape, out, &r)
            });
            (vec![x, w, b], f)
        }
        "conv2d_s1p1" => binary(draw, &[2, 3, 5, 5], &[4, 3, 3, 3], &[2, 4, 5, 5], |t, a, b| t.conv2d(a, b, 1, 1)),
        "conv2d_s2p0" => binary(draw, &[2, 2, 7, 7], &[3, 2, 3, 3], &[2, 3, 3, 3], |t, a, b| t.conv2d(a, b, 2, 0)),
        "conv2d_s2p1_k2" => binary(draw, &[1, 2, 6, 6], &[2, 2, 2, 2], &[1, 2, 4, 4], |t, a, b| t.conv2d(a, b, 2, 1)),
        "relu" => {
            let x = Param::new("x", draw.off_kink(&[4, 5]));
            let r = draw.uniform(&[4, 5]);
            let f: Recorder = Box::new(move |tape, ps| {
                let v = tape.param(&ps[0]);
                let out = tape.relu(v);
                probe(tape, out, &r)
            });
            (vec![x], f)
        }
        "avgpool2d_w2" => unary(draw, &[2, 3, 4, 4], &[2, 3, 2, 2], |t, x| t.avgpool2d(x, 2)),
        "avgpool2d_w3" => unary(draw, &[1, 2, 6, 6], &[1, 2, 2, 2], |t, x| t.avgpool2d(x, 3)),
        "reshape" => unary(draw, &[2, 6], &[3, 4], |t, x| t.reshape(x, &[3, 4])),
        "flatten" => unary(draw, &[2, 2, 3, 3], &[2, 18], |t, x| t.flatten(x)),
        "add" => binary(draw, &[3, 4], &[3, 4], &[3, 4], |t, a, b| t.add(a, b)),
        "mul" => binary(draw, &[3, 4], &[3, 4], &[3, 4], |t, a, b| t.mul(a, b)),
        "scale" => unary(draw, &[3, 4], &[3, 4], |t, x| Ok(t.scale(x, -1.7))),
        "sum" => unary(draw, &[3, 4], &[], |t, x| Ok(t.sum(x))),
        "mean" => unary(draw, &[3, 4], &[], |t, x| Ok(t.mean(x))),
        "cross_entropy" => {
            let labels = draw.labels(5, 6);
            unary(draw, &[5, 6], &[], move |t, x| t.cross_entropy(x, &labels))
        }
        "kl_divergence_t1" | "kl_divergence_t4" => {
            let temp = if name.ends_with("t1") { 1.0 } else { 4.0 };
            let teacher = draw.uniform(&[5, 6]);
            unary(draw, &[5, 6], &[], move |t, x| t.kl_divergence(x, &teacher, temp))
        }
        "mse" => binary(draw, &[2, 3, 2, 2], &[2, 3, 2, 2], &[], |t, a, b| t.mse(a, b)),
        "network_all_layers" => {
            let specs = [
                conv(3, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::AvgPool2d { window: 2 },
                conv(4, 3, 2, 1),
                LayerSpec::Relu,
                LayerSpec::Projector { out_width: 5 },
                LayerSpec::Flatten,
                LayerSpec::Affine { out_features: 6 },
                LayerSpec::Relu,
                LayerSpec::Projector { out_width: 4 },
                LayerSpec::Affine { out_features: 3 },
            ];
            let mut net = build_network(&specs, &[2, 6, 6], 3)?;
            net.init_params(draw.0.random());
            let x = draw.uniform(&[2, 2, 6, 6]);
            let labels = draw.labels(2, 3);
            network_case(draw, net, x, move |t, out| t.cross_entropy(out, &labels))
        }
        "vanilla_kd_loss" => {
            let mut net = build_network(&[LayerSpec::Affine { out_features: 4 }], &[3], 4)?;
            net.init_params(draw.0.random());
            let x = draw.uniform(&[5, 3]);
            let teacher = draw.uniform(&[5, 4]);
            let labels = draw.labels(5, 4);
            let objective = HeadObjective::Vanilla { alpha: 0.3, temperature: 2.0 };
            let params: Vec<Param<f64>> = net.params().cloned().collect();
            let f: Recorder = Box::new(move |tape, ps| {
                let mut n = net.clone();
                n.set_params(ps)?;
                let target =
                    crate::losses::BlockTarget::Head { labels: &labels, teacher_logits: Some(&teacher), objective };
                Ok(record_block_term(tape, n.layers(), &x, target)?.loss)
            });
            (params, f)
        }
        "stablekd_loss" => {
            let arch = |c: usize| {
                vec![
                    conv(c, 3, 1, 1),
                    LayerSpec::Relu,
                    conv(2 * c, 3, 1, 1),
                    LayerSpec::Relu,
                    LayerSpec::AvgPool2d { window: 2 },
                    LayerSpec::Flatten,
                    LayerSpec::Affine { out_features: 3 },
                ]
            };
            let mut teacher = build_network(&arch(3), &[1, 4, 4], 3)?;
            teacher.init_params(draw.0.random());
            teacher.freeze();
            let mut student = build_network(&arch(3), &[1, 4, 4], 3)?;
            student.init_params(draw.0.random());
            let d = Decomposition::new(&teacher, &student, 3)?;
            let x = draw.uniform(&[2, 1, 4, 4]);
            let labels = draw.labels(2, 3);
            let routes = TeacherRoutes::compute(&teacher, d.teacher.ends(), &x)?;
            let objective = HeadObjective::Blockwise { lambda: 0.7, temperature: 2.0 };
            let params: Vec<Param<f64>> = student.params().cloned().collect();
            let f: Recorder = Box::new(move |tape, ps| {
                let mut s = student.clone();
                s.set_params(ps)?;
                let mut total: Option<Var> = None;
                for (j, range) in d.student.blocks().enumerate() {
                    let (input, target) = block_target(&routes, &d, j, &labels, objective)?;
                    let term = record_block_term(tape, &s.layers()[range], input, target)?.loss;
                    total = Some(match total {
                        None => term,
                        Some(acc) => tape.add(acc, term)?,
                    });
                }
                Ok(total.expect("at least one block"))
            });
            (params, f)
        }
        other => unreachable!("unknown oracle case {other}"),
    })
}

/// Runs every case in [`CASES`] on inputs drawn from `seed`.
pub fn check_suite(seed: u64) -> Result<Vec<OpCheck>> {
    let mut out = Vec::with_capacity(CASES.len());
    for (i, name) in CASES.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let (params, f) = build_case(name, &mut Draw(rng))?;
        let report = finite_diff_check(&params, EPS, f)?;
        out.push(OpCheck { name, seed, report });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_for_one_seed() {
        for c in check_suite(3).unwrap() {
            assert!(c.passes(), "{} {:?}", c.name, c.report);
            assert!(c.report.coordinates > 0, "{}", c.name);
        }
    }
}
