/// Patience-based early stopping over optimizer iterations.
///
/// Iteration 0 is the model before any update. A validation value counts as
/// an improvement only if strictly lower than the best so far. Stopping is
/// suppressed for iterations `1..=warmup_iterations`; after that the run stops
/// at the first iteration at least `patience` past the best one.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    warmup_iterations: usize,
    best: Option<(usize, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize, warmup_iterations: usize) -> Self {
        Self {
            patience,
            warmup_iterations,
            best: None,
        }
    }

    /// Records the validation value at `iteration`. Returns whether it improved and what to do next.
    pub fn observe(&mut self, iteration: usize, value: f64) -> (bool, Decision) {
        let improved = match self.best {
            None => true,
            Some((_, best)) => value < best,
        };
        if improved {
            self.best = Some((iteration, value));
        }
        let (best_iter, _) = self.best.expect("set above");
        let decision = if iteration > self.warmup_iterations && iteration - best_iter >= self.patience {
            Decision::Stop
        } else {
            Decision::Continue
        };
        (improved, decision)
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}
