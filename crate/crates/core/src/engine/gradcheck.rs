//! Central finite-difference verification of [`Graph::backward`].

use super::graph::{Graph, NodeId};
use super::params::ParamSet;
use super::EngineError;

/// Outcome for one parameter tensor.
#[derive(Debug, Clone)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_error: f64,
    /// Entries compared against the finite difference.
    pub checked: usize,
    /// Entries skipped because a perturbation crossed a relu or pinball kink.
    pub excluded: usize,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
    /// Set when the loss closure itself failed.
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.blocks.iter().all(|b| b.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn excluded(&self) -> usize {
        self.blocks.iter().map(|b| b.excluded).sum()
    }
}

fn evaluate<F>(params: &ParamSet, build: &F) -> Result<(f64, Vec<i8>), EngineError>
where
    F: Fn(&mut Graph) -> Result<NodeId, EngineError>,
{
    let mut graph = Graph::with_params(params);
    graph.track_kinks(true);
    let loss = build(&mut graph)?;
    let value = graph.value(loss);
    if !value.is_scalar() {
        return Err(EngineError::NotScalar(value.shape().to_vec()));
    }
    Ok((value.item(), graph.kink_signature().to_vec()))
}

/// Compare analytic gradients of the scalar built by `build` against central
/// differences with step `step`.
///
/// The relative error of an entry is `|a - n| / max(|a|, |n|, floor)` where
/// `floor = 1e-6 * max(1, |loss|)` absorbs round-off on near-zero gradients.
/// An entry is excluded when the `+step` or `-step` evaluation changes the
/// sign pattern of any relu / pinball input, which includes inputs sitting
/// exactly on the kink.
pub fn grad_check<F>(params: &ParamSet, build: F, step: f64, tolerance: f64) -> GradCheckReport
where
    F: Fn(&mut Graph) -> Result<NodeId, EngineError>,
{
    let mut report = GradCheckReport {
        step,
        tolerance,
        blocks: Vec::new(),
        failure: None,
    };
    let analytic = (|| {
        let mut graph = Graph::with_params(params);
        let loss = build(&mut graph)?;
        graph.backward(loss)
    })();
    let analytic = match analytic {
        Ok(g) => g,
        Err(e) => {
            report.failure = Some(e.to_string());
            return report;
        }
    };
    let (base_loss, base_sig) = match evaluate(params, &build) {
        Ok(v) => v,
        Err(e) => {
            report.failure = Some(e.to_string());
            return report;
        }
    };
    let floor = 1e-6 * base_loss.abs().max(1.0);

    let mut probe = params.clone();
    for id in params.ids() {
        let mut block = BlockReport {
            name: params.name(id).to_string(),
            max_rel_error: 0.0,
            checked: 0,
            excluded: 0,
            passed: true,
        };
        for i in 0..params.get(id).len() {
            let original = params.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = original + step;
            let plus = evaluate(&probe, &build);
            probe.get_mut(id).data_mut()[i] = original - step;
            let minus = evaluate(&probe, &build);
            probe.get_mut(id).data_mut()[i] = original;
            let ((fp, sp), (fm, sm)) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(e), _) | (_, Err(e)) => {
                    report.failure = Some(e.to_string());
                    return report;
                }
            };
            if sp != base_sig || sm != base_sig {
                block.excluded += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic.get(id).data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            block.max_rel_error = block.max_rel_error.max(rel);
            block.checked += 1;
        }
        block.passed = block.max_rel_error < tolerance;
        report.blocks.push(block);
    }
    report
}
