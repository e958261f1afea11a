//! Gradient-check suite over every op kind and every model family at toy
//! sizes. Shared by the `gradcheck` subcommand and the test suites.

use crate::engine::{
    grad_check, EngineError, Fill, GradCheckReport, Graph, NodeId, OpKind, ParamId, ParamSet,
    SeededRng, Tensor,
};
use crate::loss::{quantile_loss_node, LossError};
use crate::models::{build_model, Family, ModelError, ModelSpec};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub excluded: usize,
    pub passed: bool,
}

impl SuiteEntry {
    fn absorb(&mut self, report: &GradCheckReport) {
        self.max_rel_error = self.max_rel_error.max(report.max_rel_error());
        self.checked += report.blocks.iter().map(|b| b.checked).sum::<usize>();
        self.excluded += report.excluded();
        self.passed &= report.passed();
    }

    fn new(name: String) -> Self {
        Self {
            name,
            max_rel_error: 0.0,
            checked: 0,
            excluded: 0,
            passed: true,
        }
    }
}

pub fn op_kinds() -> Vec<OpKind> {
    vec![
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Hadamard,
        OpKind::ScalarMul(-1.7),
        OpKind::Concat { axis: 1 },
        OpKind::Slice {
            axis: 1,
            start: 1,
            len: 2,
        },
        OpKind::Reshape(vec![6, 2]),
        OpKind::Transpose,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Relu,
        OpKind::Conv1d,
        OpKind::Conv2d,
        OpKind::ReduceMean,
        OpKind::ReduceSum,
        OpKind::ReverseTime,
        OpKind::Pinball(vec![0.05, 0.5, 0.95]),
    ]
}

fn operand_shapes(kind: &OpKind) -> Vec<Vec<usize>> {
    match kind {
        OpKind::MatMul => vec![vec![2, 3], vec![3, 2]],
        OpKind::Add | OpKind::Sub | OpKind::Hadamard => vec![vec![2, 3], vec![3]],
        OpKind::Concat { .. } => vec![vec![2, 1, 3], vec![2, 2, 3]],
        OpKind::Conv1d => vec![vec![2, 4, 2], vec![2, 2, 3]],
        OpKind::Conv2d => vec![vec![2, 4, 3, 1], vec![2, 3, 1, 2]],
        OpKind::Pinball(_) => vec![vec![2, 3]],
        _ => vec![vec![2, 3, 2]],
    }
}

fn random_param(params: &mut ParamSet, name: &str, shape: &[usize], rng: &mut SeededRng) -> ParamId {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_range(-10.0, 10.0)).collect();
    params.add(name, Tensor::from_vec(shape, data).expect("shape matches data"))
}

/// Contracts an op output against fixed random weights so every output
/// entry receives a distinct upstream gradient.
fn contract(g: &mut Graph, out: NodeId, seed: u64) -> Result<NodeId, EngineError> {
    let shape = g.shape(out).to_vec();
    let mut rng = SeededRng::new(seed);
    let n: usize = shape.iter().product();
    let w = (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let w = g.input(Tensor::from_vec(&shape, w)?);
    let prod = g.hadamard(out, w)?;
    g.reduce_sum(prod)
}

/// `trials` random graphs `sum(w * op(inputs))` with inputs in [-10, 10].
pub fn op_gradcheck(kind: &OpKind, trials: u64) -> SuiteEntry {
    let mut entry = SuiteEntry::new(format!("op {}", kind.name()));
    for trial in 0..trials {
        let mut rng = SeededRng::new(1000 + trial);
        let mut params = ParamSet::new();
        let ids: Vec<ParamId> = operand_shapes(kind)
            .iter()
            .enumerate()
            .map(|(i, s)| random_param(&mut params, &format!("in{i}"), s, &mut rng))
            .collect();
        let report = grad_check(
            &params,
            |g| {
                let mut nodes: Vec<NodeId> = ids.iter().map(|&i| g.param(i)).collect();
                if matches!(kind, OpKind::Transpose) {
                    nodes = vec![g.reshape(nodes[0], &[3, 4])?];
                }
                let out = g.apply(kind.clone(), &nodes)?;
                contract(g, out, 99 + trial)
            },
            STEP,
            TOLERANCE,
        );
        entry.absorb(&report);
    }
    entry
}

fn model_to_engine(e: ModelError) -> EngineError {
    match e {
        ModelError::Engine(e) => e,
        ModelError::Numerical { .. } => EngineError::NonFinite { op: "forward" },
        other => panic!("toy model failed: {other}"),
    }
}

fn loss_to_engine(e: LossError) -> EngineError {
    match e {
        LossError::Engine(e) => e,
        other => panic!("toy loss failed: {other}"),
    }
}

/// Quantile-loss gradient check of one family with `h = 3`, `d = 4`, `m = 2`.
pub fn family_gradcheck(family: Family, features: usize) -> GradCheckReport {
    let spec = ModelSpec::new(family, features, 4, 2).with_hidden(3, 3);
    let model = build_model(&spec, &mut SeededRng::new(21)).expect("toy spec is valid");
    let windows = Tensor::new(&[2, 4, features], Fill::StandardNormal, &mut SeededRng::new(22))
        .expect("valid shape");
    let targets =
        Tensor::new(&[2, 2], Fill::StandardNormal, &mut SeededRng::new(23)).expect("valid shape");
    grad_check(
        model.params(),
        |g| {
            let x = g.input(windows.clone());
            let y = g.input(targets.clone());
            let pred = model.forward(g, x).map_err(model_to_engine)?;
            quantile_loss_node(g, y, pred, &spec.quantiles).map_err(loss_to_engine)
        },
        STEP,
        TOLERANCE,
    )
}

/// Every op kind (`trials` graphs each) and every family with `f` in {1, 3}.
pub fn run(trials: u64) -> Vec<SuiteEntry> {
    let mut out: Vec<SuiteEntry> = op_kinds().iter().map(|k| op_gradcheck(k, trials)).collect();
    for family in Family::ALL {
        for f in [1, 3] {
            let mut entry = SuiteEntry::new(format!("model {} f={f}", family.as_str()));
            entry.absorb(&family_gradcheck(family, f));
            out.push(entry);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_kind_passes() {
        for kind in op_kinds() {
            let entry = op_gradcheck(&kind, 100);
            assert!(entry.passed, "{entry:?}");
            assert!(entry.checked > 0);
        }
    }

    #[test]
    fn every_family_passes() {
        for family in Family::ALL {
            for f in [1, 3] {
                let report = family_gradcheck(family, f);
                assert!(report.passed(), "{family} f={f}: {report:?}");
            }
        }
    }

    #[test]
    fn pinball_kinks_are_excluded_not_failed() {
        let mut params = ParamSet::new();
        let p = params.add("u", Tensor::from_vec(&[3, 1], vec![0.0, 1.0, -2.0]).unwrap());
        let report = grad_check(
            &params,
            |g| {
                let u = g.param(p);
                let l = g.pinball(u, &[0.3])?;
                g.reduce_sum(l)
            },
            STEP,
            TOLERANCE,
        );
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.excluded(), 1);
    }
}
