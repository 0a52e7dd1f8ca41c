//! Central finite-difference checks for every differentiable graph op and
//! loss, at 64-bit precision.

use mtnet::tensor::{Graph, Tensor, Var};
use mtnet::Result;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
pub const MIN_ENTRIES: usize = 100;
/// Entries checked per case when the inputs hold more than this many.
const MAX_ENTRIES: usize = 300;
/// Relative error is `|analytic - numeric| / max(|analytic|, |numeric|, FLOOR)`.
const FLOOR: f64 = 1e-3;

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

pub struct GradCase {
    pub name: &'static str,
    inputs: Vec<Tensor<f64>>,
    build: Build,
}

#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.checked >= MIN_ENTRIES && self.max_rel < TOLERANCE
    }
}

fn loss_of(build: &Build, inputs: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars).expect("forward");
    g.value(loss).item()
}

impl GradCase {
    pub fn run(&self) -> GradReport {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = (self.build)(&mut g, &vars).expect("forward");
        g.backward(loss).expect("backward");
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .zip(&self.inputs)
            .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();

        let flat: Vec<(usize, usize)> = self
            .inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
            .collect();
        let picked: Vec<(usize, usize)> = if flat.len() <= MAX_ENTRIES {
            flat
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(flat.len() as u64);
            sample(&mut rng, flat.len(), MAX_ENTRIES).into_iter().map(|k| flat[k]).collect()
        };

        let mut max_rel = 0.0f64;
        let mut inputs = self.inputs.clone();
        for &(i, j) in &picked {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + STEP;
            let up = loss_of(&self.build, &inputs);
            inputs[i].data_mut()[j] = orig - STEP;
            let down = loss_of(&self.build, &inputs);
            inputs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            max_rel = max_rel.max(rel);
        }
        GradReport {
            checked: picked.len(),
            max_rel,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values in `[-hi, -lo] U [lo, hi]`, keeping clear of kinks at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(lo..hi);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Reduces `out` to a scalar through a fixed random projection so every
/// output entry carries a distinct weight.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = uniform(&mut rng, g.shape(out), -1.0, 1.0);
    let r = g.input(r);
    let m = g.mul(out, r)?;
    Ok(g.sum(m))
}

fn case(name: &'static str, inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> GradCase {
    GradCase {
        name,
        inputs,
        build: Box::new(build),
    }
}

pub fn all_cases() -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let rng = &mut rng;
    let mut cases = Vec::new();

    cases.push(case(
        "fully_connected",
        vec![uniform(rng, &[6, 10], -1.0, 1.0), uniform(rng, &[10, 8], -1.0, 1.0), uniform(rng, &[8], -1.0, 1.0)],
        |g, v| {
            let y = g.fully_connected(v[0], v[1], v[2])?;
            project(g, y, 1)
        },
    ));
    cases.push(case(
        "conv2d_3x3_dilation2",
        vec![
            uniform(rng, &[2, 2, 6, 6], -1.0, 1.0),
            uniform(rng, &[3, 2, 3, 3], -1.0, 1.0),
            uniform(rng, &[3], -1.0, 1.0),
        ],
        |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 1, 2)?;
            project(g, y, 2)
        },
    ));
    cases.push(case(
        "conv2d_1x1_stride2",
        vec![
            uniform(rng, &[2, 3, 6, 6], -1.0, 1.0),
            uniform(rng, &[4, 3, 1, 1], -1.0, 1.0),
            uniform(rng, &[4], -1.0, 1.0),
        ],
        |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 2, 1)?;
            project(g, y, 3)
        },
    ));
    cases.push(case(
        "conv1d_dilation2",
        vec![
            uniform(rng, &[2, 3, 16], -1.0, 1.0),
            uniform(rng, &[4, 3, 3], -1.0, 1.0),
            uniform(rng, &[4], -1.0, 1.0),
        ],
        |g, v| {
            let y = g.conv1d(v[0], v[1], v[2], 2)?;
            project(g, y, 4)
        },
    ));
    cases.push(case(
        "batch_norm_train",
        vec![
            uniform(rng, &[4, 3, 3, 3], -2.0, 2.0),
            uniform(rng, &[3], 0.5, 1.5),
            uniform(rng, &[3], -0.5, 0.5),
        ],
        |g, v| {
            let y = g.batch_norm_train(v[0], v[1], v[2], "bn")?;
            project(g, y, 5)
        },
    ));
    cases.push(case(
        "batch_norm_infer",
        vec![
            uniform(rng, &[4, 3, 3, 3], -2.0, 2.0),
            uniform(rng, &[3], 0.5, 1.5),
            uniform(rng, &[3], -0.5, 0.5),
        ],
        |g, v| {
            let y = g.batch_norm_infer(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0])?;
            project(g, y, 6)
        },
    ));
    cases.push(case("relu", vec![away_from_zero(rng, &[10, 12], 0.05, 1.0)], |g, v| {
        let y = g.relu(v[0]);
        project(g, y, 7)
    }));
    cases.push(case("tanh", vec![uniform(rng, &[10, 12], -2.0, 2.0)], |g, v| {
        let y = g.tanh(v[0]);
        project(g, y, 8)
    }));
    cases.push(case("sigmoid", vec![uniform(rng, &[10, 12], -4.0, 4.0)], |g, v| {
        let y = g.sigmoid(v[0]);
        project(g, y, 9)
    }));
    cases.push(case("softmax", vec![uniform(rng, &[10, 12], -3.0, 3.0)], |g, v| {
        let y = g.softmax(v[0]);
        project(g, y, 10)
    }));
    cases.push(case("global_avg_pool", vec![uniform(rng, &[2, 3, 4, 5], -1.0, 1.0)], |g, v| {
        let y = g.global_avg_pool(v[0])?;
        project(g, y, 11)
    }));
    cases.push(case(
        "add",
        vec![uniform(rng, &[8, 8], -1.0, 1.0), uniform(rng, &[8, 8], -1.0, 1.0)],
        |g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y, 12)
        },
    ));
    cases.push(case(
        "mul",
        vec![uniform(rng, &[8, 8], -1.0, 1.0), uniform(rng, &[8, 8], -1.0, 1.0)],
        |g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, 13)
        },
    ));
    cases.push(case("reshape", vec![uniform(rng, &[120], -1.0, 1.0)], |g, v| {
        let y = g.reshape(v[0], &[10, 12])?;
        project(g, y, 14)
    }));
    cases.push(case("scale", vec![uniform(rng, &[10, 12], -1.0, 1.0)], |g, v| {
        let y = g.scale(v[0], -0.7);
        project(g, y, 15)
    }));
    cases.push(case("sum", vec![uniform(rng, &[10, 12], -1.0, 1.0)], |g, v| {
        let t = g.tanh(v[0]);
        let s = g.sum(t);
        let sq = g.sum_squares(&[s]);
        Ok(sq)
    }));
    cases.push(case(
        "sum_squares",
        vec![uniform(rng, &[6, 10], -1.0, 1.0), uniform(rng, &[50], -1.0, 1.0)],
        |g, v| Ok(g.sum_squares(&[v[0], v[1]])),
    ));
    cases.push(case(
        "weighted_sum",
        vec![uniform(rng, &[60], -1.0, 1.0), uniform(rng, &[60], -1.0, 1.0)],
        |g, v| {
            let a = project(g, v[0], 16)?;
            let b = g.sum_squares(&[v[1]]);
            g.weighted_sum(&[(a, 0.3), (b, -1.7)])
        },
    ));
    cases.push(case("cross_entropy", vec![uniform(rng, &[12, 10], -3.0, 3.0)], |g, v| {
        let p = g.softmax(v[0]);
        let onehot = Tensor::from_fn(&[12, 10], |k| if k % 10 == (k / 10 * 7) % 10 { 1.0 } else { 0.0 });
        g.cross_entropy(p, &onehot)
    }));
    cases.push(case(
        "cosine_distance",
        vec![uniform(rng, &[4, 30], -1.0, 1.0), uniform(rng, &[4, 30], -1.0, 1.0)],
        |g, v| g.cosine_distance(v[0], v[1]),
    ));
    {
        // residuals spread over both branches, none within 0.05 of the joint
        let target = uniform(rng, &[10, 12], -1.0, 1.0);
        let residual = away_from_zero(rng, &[10, 12], 0.05, 2.5);
        let pred = Tensor::from_fn(&[10, 12], |k| {
            let r = residual.data()[k];
            let r = if (r.abs() - 1.0).abs() < 0.05 { r * 1.2 } else { r };
            target.data()[k] - r
        });
        cases.push(case("smooth_l1", vec![pred], move |g, v| g.smooth_l1_mean(v[0], &target)));
    }
    {
        let target = uniform(rng, &[10, 12], -1.0, 1.0);
        cases.push(case("half_mse", vec![uniform(rng, &[10, 12], -1.0, 1.0)], move |g, v| g.half_mse(v[0], &target)));
    }
    {
        // weighted combination of all data terms plus weight decay
        let onehot = Tensor::from_fn(&[4, 5], |k| if k % 5 == k / 5 { 1.0 } else { 0.0 });
        let phi_a = uniform(rng, &[4, 30], -1.0, 1.0);
        let audio = uniform(rng, &[4, 30], -0.5, 0.5);
        cases.push(case(
            "joint_loss",
            vec![
                uniform(rng, &[4, 5], -2.0, 2.0),
                uniform(rng, &[4, 30], -1.0, 1.0),
                uniform(rng, &[30, 30], -0.3, 0.3),
            ],
            move |g, v| {
                let p = g.softmax(v[0]);
                let per = g.cross_entropy(p, &onehot)?;
                let phi_a = g.input(phi_a.clone());
                let rep = g.cosine_distance(phi_a, v[1])?;
                let zero = g.input(Tensor::zeros(&[30]));
                let gen = g.fully_connected(v[1], v[2], zero)?;
                let gen = g.tanh(gen);
                let gen = g.smooth_l1_mean(gen, &audio)?;
                let decay = g.sum_squares(&[v[2]]);
                g.weighted_sum(&[(per, 0.5), (rep, 1.0), (gen, 1.0), (decay, 0.8)])
            },
        ));
    }
    cases.push(case(
        "gated_residual_block_1d",
        vec![
            uniform(rng, &[2, 4, 12], -1.0, 1.0),
            uniform(rng, &[4, 4, 3], -0.5, 0.5),
            uniform(rng, &[4], -0.5, 0.5),
            uniform(rng, &[4, 4, 3], -0.5, 0.5),
            uniform(rng, &[4], -0.5, 0.5),
        ],
        |g, v| {
            let f = g.conv1d(v[0], v[1], v[2], 2)?;
            let f = g.tanh(f);
            let s = g.conv1d(v[0], v[3], v[4], 2)?;
            let s = g.sigmoid(s);
            let gated = g.mul(f, s)?;
            let e = g.add(gated, v[0])?;
            let y = g.tanh(e);
            project(g, y, 17)
        },
    ));
    cases
}
