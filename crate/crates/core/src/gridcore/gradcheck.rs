//! Central-difference verification of tape gradients.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::gridcore::{NodeId, ParamStore, Tape, Tensor};

/// Relative deviations below this magnitude are measured against it instead,
/// so gradients that are zero up to rounding do not register as failures.
pub const DEFAULT_ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamDeviation {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamDeviation>,
    pub tol: f64,
    /// Elements compared.
    pub checked: usize,
    /// Elements left out because a probe moved a ReLU input across zero.
    pub kink_crossings: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tol)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamDeviation> {
        self.params.iter().filter(|p| p.max_rel_error >= self.tol)
    }
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub tol: f64,
    pub abs_floor: f64,
    /// Check at most this many elements per parameter, evenly strided.
    pub max_elements: Option<usize>,
}

impl GradCheck {
    pub fn new(step: f64, tol: f64) -> Self {
        GradCheck {
            step,
            tol,
            abs_floor: DEFAULT_ABS_FLOOR,
            max_elements: None,
        }
    }

    pub fn max_elements(mut self, n: usize) -> Self {
        self.max_elements = Some(n);
        self
    }

    fn indices(&self, len: usize) -> Vec<usize> {
        match self.max_elements {
            Some(k) if k < len => (0..k).map(|i| i * len / k).collect(),
            _ => (0..len).collect(),
        }
    }

    /// Runs `forward` once with backward to get tape gradients, then compares
    /// every checked element against a central difference of the loss.
    pub fn run<F>(&self, store: &ParamStore, forward: F) -> Result<GradCheckReport>
    where
        F: Fn(&ParamStore) -> Result<(Tape, NodeId)>,
    {
        let analytic = analytic_gradients(store, &forward)?;
        let (numeric, crossings) = self.probe(store, &forward)?;
        let mut report = self.compare(&analytic, &numeric);
        report.kink_crossings = crossings;
        Ok(report)
    }

    /// Central differences at the checked indices; unchecked entries are NaN.
    pub fn numeric_gradients<F>(
        &self,
        store: &ParamStore,
        forward: F,
    ) -> Result<BTreeMap<String, Tensor>>
    where
        F: Fn(&ParamStore) -> Result<(Tape, NodeId)>,
    {
        self.probe(store, forward).map(|(g, _)| g)
    }

    /// Central differences plus the number of elements whose probes changed
    /// the ReLU activation pattern. A difference across a kink does not
    /// estimate the derivative, so those elements are left NaN.
    fn probe<F>(&self, store: &ParamStore, forward: F) -> Result<(BTreeMap<String, Tensor>, usize)>
    where
        F: Fn(&ParamStore) -> Result<(Tape, NodeId)>,
    {
        let loss_at = |s: &ParamStore| -> Result<(f64, Vec<bool>)> {
            let (tape, loss) = forward(s)?;
            Ok((tape.value(loss).item(), tape.relu_pattern()))
        };
        let (a, pattern) = loss_at(store)?;
        let (b, _) = loss_at(store)?;
        if a.to_bits() != b.to_bits() {
            return Err(Error::Usage(format!(
                "forward closure is not deterministic ({a} vs {b})"
            )));
        }
        let mut probe = store.clone();
        let mut out = BTreeMap::new();
        let mut crossings = 0;
        for (name, entry) in store.iter() {
            let mut g = Tensor::full(entry.value.shape(), f64::NAN);
            for idx in self.indices(entry.value.len()) {
                let orig = entry.value.data()[idx];
                probe.value_mut(name)?.data_mut()[idx] = orig + self.step;
                let (plus, p_plus) = loss_at(&probe)?;
                probe.value_mut(name)?.data_mut()[idx] = orig - self.step;
                let (minus, p_minus) = loss_at(&probe)?;
                probe.value_mut(name)?.data_mut()[idx] = orig;
                if p_plus != pattern || p_minus != pattern {
                    crossings += 1;
                    continue;
                }
                g.data_mut()[idx] = (plus - minus) / (2.0 * self.step);
            }
            out.insert(name.to_string(), g);
        }
        Ok((out, crossings))
    }

    /// Per-parameter worst relative deviation over entries where `numeric`
    /// is not NaN.
    pub fn compare(
        &self,
        analytic: &BTreeMap<String, Tensor>,
        numeric: &BTreeMap<String, Tensor>,
    ) -> GradCheckReport {
        let mut params = Vec::new();
        let mut checked = 0;
        for (name, num) in numeric {
            let zeros = Tensor::zeros(num.shape());
            let ad = analytic.get(name).unwrap_or(&zeros);
            let mut worst = ParamDeviation {
                name: name.clone(),
                max_rel_error: 0.0,
                worst_index: 0,
                analytic: 0.0,
                numeric: 0.0,
            };
            for (i, (&a, &n)) in ad.data().iter().zip(num.data()).enumerate() {
                if n.is_nan() {
                    continue;
                }
                checked += 1;
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(self.abs_floor);
                if rel > worst.max_rel_error || rel.is_nan() {
                    worst = ParamDeviation {
                        name: name.clone(),
                        max_rel_error: if rel.is_nan() { f64::INFINITY } else { rel },
                        worst_index: i,
                        analytic: a,
                        numeric: n,
                    };
                }
            }
            params.push(worst);
        }
        GradCheckReport {
            params,
            tol: self.tol,
            checked,
            kink_crossings: 0,
        }
    }
}

/// Tape gradients of `forward`'s loss for every entry of `store`.
pub fn analytic_gradients<F>(store: &ParamStore, forward: F) -> Result<BTreeMap<String, Tensor>>
where
    F: Fn(&ParamStore) -> Result<(Tape, NodeId)>,
{
    let (tape, loss) = forward(store)?;
    let mut grads = tape.gradients(loss)?;
    for (name, e) in store.iter() {
        grads
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(e.value.shape()));
    }
    Ok(grads)
}

/// Convenience wrapper: check every element of every parameter.
pub fn gradient_check<F>(store: &ParamStore, forward: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(Tape, NodeId)>,
{
    GradCheck::new(h, tol).run(store, forward)
}
