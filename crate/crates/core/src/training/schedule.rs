/// Improvement margin: a validation loss counts as better only when it is
/// below the best seen by more than this.
pub const IMPROVEMENT_TOL: f64 = 1e-6;

/// What happened at the end of one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EpochOutcome {
    pub improved: bool,
    pub decayed: bool,
    pub stop: bool,
}

/// Tracks the two patience windows. The plateau counter resets after a
/// decay, the early-stop counter only on improvement.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauTracker {
    best: f64,
    since_decay: usize,
    since_best: usize,
    lr: f64,
    plateau_patience: usize,
    stop_patience: usize,
    decay_factor: f64,
}

impl PlateauTracker {
    /// `baseline` is the validation loss before any training.
    pub fn new(baseline: f64, lr0: f64, plateau_patience: usize, stop_patience: usize, decay_factor: f64) -> Self {
        Self {
            best: baseline,
            since_decay: 0,
            since_best: 0,
            lr: lr0,
            plateau_patience,
            stop_patience,
            decay_factor,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, val_loss: f64) -> EpochOutcome {
        let mut out = EpochOutcome::default();
        if val_loss < self.best - IMPROVEMENT_TOL {
            self.best = val_loss;
            self.since_decay = 0;
            self.since_best = 0;
            out.improved = true;
            return out;
        }
        self.since_decay += 1;
        self.since_best += 1;
        if self.since_decay >= self.plateau_patience {
            self.lr /= self.decay_factor;
            self.since_decay = 0;
            out.decayed = true;
        }
        out.stop = self.since_best >= self.stop_patience;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tracker() -> PlateauTracker {
        PlateauTracker::new(1.0, 1e-3, 5, 10, 10.0)
    }

    #[test]
    fn frozen_loss_decays_twice_then_stops() {
        let mut t = tracker();
        let mut decays = Vec::new();
        let mut stopped = None;
        for epoch in 1..=30 {
            let o = t.observe(1.0);
            if o.decayed {
                decays.push(epoch);
            }
            if o.stop {
                stopped = Some(epoch);
                break;
            }
        }
        assert_eq!(decays, [5, 10]);
        assert_eq!(stopped, Some(10));
        assert!((t.lr() - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn steady_improvement_never_decays() {
        let mut t = tracker();
        for e in 1..=100 {
            let o = t.observe(1.0 - e as f64 * 1e-3);
            assert!(o.improved && !o.decayed && !o.stop);
        }
        assert_eq!(t.lr(), 1e-3);
    }

    #[test]
    fn jitter_below_tolerance_is_not_improvement() {
        let mut t = tracker();
        assert!(!t.observe(1.0 - 5e-7).improved);
        assert!(t.observe(1.0 - 2e-6).improved);
    }

    #[test]
    fn improvement_resets_both_counters() {
        let mut t = tracker();
        for _ in 0..4 {
            t.observe(1.0);
        }
        assert!(t.observe(0.5).improved);
        let flags: Vec<_> = (0..5).map(|_| t.observe(0.5).decayed).collect();
        assert_eq!(flags, [false, false, false, false, true]);
    }
}
