use super::{ForwardCache, ModelError, Prediction, ReferenceModel};
use crate::record::GraphRecord;
use crate::scalar::{sign0, Scalar};

/// Weighted multitask L1 loss and its two terms.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown<T> {
    pub total: T,
    /// Mean over graphs of `|e_pred/n - e/n|`.
    pub energy_term: T,
    /// Mean over all force components of `|F_pred - F|`.
    pub force_term: T,
    /// `e_pred/n - e/n` per graph.
    pub residuals: Vec<T>,
}

/// Unnormalized L1 sums, additive across batch shards.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossSums<T> {
    pub abs_energy_per_atom: T,
    pub graphs: usize,
    pub abs_force: T,
    pub components: usize,
}

impl<T: Scalar> LossSums<T> {
    pub fn add(&mut self, other: &Self) {
        self.abs_energy_per_atom += other.abs_energy_per_atom;
        self.graphs += other.graphs;
        self.abs_force += other.abs_force;
        self.components += other.components;
    }

    pub fn energy_term(&self) -> T {
        if self.graphs == 0 {
            T::zero()
        } else {
            self.abs_energy_per_atom / T::of_usize(self.graphs)
        }
    }

    pub fn force_term(&self) -> T {
        if self.components == 0 {
            T::zero()
        } else {
            self.abs_force / T::of_usize(self.components)
        }
    }

    pub fn total(&self, alpha_energy: T, alpha_forces: T) -> T {
        alpha_energy * self.energy_term() + alpha_forces * self.force_term()
    }
}

pub fn mtl_loss<T: Scalar>(
    predictions: &[Prediction<T>],
    targets: &[GraphRecord],
    alpha_energy: T,
    alpha_forces: T,
) -> Result<LossBreakdown<T>, ModelError> {
    if predictions.len() != targets.len() {
        return Err(ModelError::Shape(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let mut sums = LossSums::default();
    let mut residuals = Vec::with_capacity(targets.len());
    for (g, (p, t)) in predictions.iter().zip(targets).enumerate() {
        if p.forces.len() != t.n_atoms() {
            return Err(ModelError::Shape(format!(
                "graph {g}: {} predicted force rows for {} atoms",
                p.forces.len(),
                t.n_atoms()
            )));
        }
        let (r, s) = graph_terms(p, t);
        residuals.push(r);
        sums.add(&s);
    }
    Ok(LossBreakdown {
        total: sums.total(alpha_energy, alpha_forces),
        energy_term: sums.energy_term(),
        force_term: sums.force_term(),
        residuals,
    })
}

fn graph_terms<T: Scalar>(p: &Prediction<T>, t: &GraphRecord) -> (T, LossSums<T>) {
    let n = T::of_usize(t.n_atoms());
    let r = p.energy / n - T::of(t.energy) / n;
    let mut abs_force = T::zero();
    for (fp, ft) in p.forces.iter().zip(&t.forces) {
        for k in 0..3 {
            abs_force += (fp[k] - T::of(ft[k])).abs();
        }
    }
    let sums = LossSums { abs_energy_per_atom: r.abs(), graphs: 1, abs_force, components: 3 * t.n_atoms() };
    (r, sums)
}

/// Forward outputs of a batch, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchForward<T> {
    pub sums: LossSums<T>,
    outputs: Vec<(Prediction<T>, ForwardCache<T>)>,
}

impl<T: Scalar> ReferenceModel<T> {
    pub fn forward_batch(&self, batch: &[GraphRecord]) -> BatchForward<T> {
        let mut sums = LossSums::default();
        let outputs = batch
            .iter()
            .map(|r| {
                let (pred, cache) = self.forward(r);
                sums.add(&graph_terms(&pred, r).1);
                (pred, cache)
            })
            .collect();
        BatchForward { sums, outputs }
    }

    /// Accumulates into `grad` the gradient of the loss averaged over
    /// `normalizer = (graphs, components)`.
    pub fn backward_batch(&self, batch: &[GraphRecord], fwd: &BatchForward<T>, normalizer: (usize, usize), grad: &mut [T]) {
        let (ae, af) = (T::of(self.config.alpha_energy), T::of(self.config.alpha_forces));
        for (r, (pred, cache)) in batch.iter().zip(&fwd.outputs) {
            let (de, df) = seeds(pred, r, ae, af, normalizer.0, normalizer.1);
            self.backward(r, cache, de, &df, grad);
        }
    }

    /// Loss sums and parameter gradient over `batch`.
    ///
    /// `normalizer` is the `(graphs, components)` count the loss is averaged
    /// over; it defaults to the batch's own counts. Data-parallel ranks pass the
    /// global batch counts so per-rank gradients add up to the global gradient.
    pub fn batch_gradient(&self, batch: &[GraphRecord], normalizer: Option<(usize, usize)>) -> (LossSums<T>, Vec<T>) {
        let norm = normalizer.unwrap_or_else(|| (batch.len(), batch.iter().map(|r| 3 * r.n_atoms()).sum()));
        let fwd = self.forward_batch(batch);
        let mut grad = vec![T::zero(); self.params.len()];
        self.backward_batch(batch, &fwd, norm, &mut grad);
        (fwd.sums, grad)
    }

    /// Loss sums without gradients.
    pub fn evaluate(&self, batch: &[GraphRecord]) -> LossSums<T> {
        let mut sums = LossSums::default();
        for r in batch {
            sums.add(&graph_terms(&self.predict(r), r).1);
        }
        sums
    }
}

/// Derivatives of the normalized loss with respect to one graph's outputs.
pub(crate) fn seeds<T: Scalar>(
    pred: &Prediction<T>,
    t: &GraphRecord,
    alpha_energy: T,
    alpha_forces: T,
    graphs: usize,
    components: usize,
) -> (T, Vec<[T; 3]>) {
    let n = T::of_usize(t.n_atoms());
    let r = pred.energy / n - T::of(t.energy) / n;
    let de = alpha_energy * sign0(r) / (n * T::of_usize(graphs.max(1)));
    let scale = alpha_forces / T::of_usize(components.max(1));
    let df = pred
        .forces
        .iter()
        .zip(&t.forces)
        .map(|(fp, ft)| {
            let mut g = [T::zero(); 3];
            for k in 0..3 {
                g[k] = scale * sign0(fp[k] - T::of(ft[k]));
            }
            g
        })
        .collect();
    (de, df)
}
