use std::collections::BTreeMap;

use super::{softmax, ContextKey, LmError, Step, TabularLM};

/// Sparse gradient over logit rows, keyed by context.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradient {
    rows: BTreeMap<ContextKey, Vec<f64>>,
}

impl Gradient {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ContextKey, &[f64])> {
        self.rows.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn get(&self, ctx: &ContextKey) -> Option<&[f64]> {
        self.rows.get(ctx).map(|v| v.as_slice())
    }

    /// Adds `scale * row` into the entry for `ctx`.
    pub fn add_row(&mut self, ctx: &ContextKey, row: &[f64], scale: f64) {
        let entry = self
            .rows
            .entry(ctx.clone())
            .or_insert_with(|| vec![0.0; row.len()]);
        for (e, r) in entry.iter_mut().zip(row) {
            *e += scale * r;
        }
    }

    /// Adds `coef * d log P(y|x) / d logits`, where the derivative at each
    /// step is `onehot(token) - softmax(logits)`.
    pub fn add_logprob(&mut self, lm: &TabularLM, steps: &[Step], coef: f64) -> Result<(), LmError> {
        if coef == 0.0 {
            return Ok(());
        }
        for step in steps {
            let mut row = softmax(&lm.logits(&step.context)?);
            for p in row.iter_mut() {
                *p = -*p;
            }
            row[step.token as usize] += 1.0;
            self.add_row(&step.context, &row, coef);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Gradient, scale: f64) {
        for (k, v) in other.iter() {
            self.add_row(k, v, scale);
        }
    }

    pub fn scaled(mut self, s: f64) -> Self {
        for v in self.rows.values_mut() {
            for x in v.iter_mut() {
                *x *= s;
            }
        }
        self
    }

    /// Euclidean norm over all entries.
    pub fn norm(&self) -> f64 {
        self.rows
            .values()
            .flat_map(|v| v.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Entry `(ctx, k)`, zero when absent.
    pub fn component(&self, ctx: &ContextKey, k: usize) -> f64 {
        self.rows.get(ctx).map_or(0.0, |v| v[k])
    }

    pub fn into_rows(self) -> BTreeMap<ContextKey, Vec<f64>> {
        self.rows
    }
}
