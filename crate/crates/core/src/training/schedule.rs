/// Divide-by-10 schedule driven by a validation accuracy that has stopped
/// improving.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    pub initial_lr: f64,
    pub lr: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub max_drops: usize,
    best: Option<f64>,
    stale: usize,
    drops: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, patience: usize, min_delta: f64, max_drops: usize) -> Self {
        PlateauSchedule {
            initial_lr: lr,
            lr,
            patience,
            min_delta,
            max_drops,
            best: None,
            stale: 0,
            drops: 0,
        }
    }

    pub fn drops(&self) -> usize {
        self.drops
    }

    /// Records one epoch's accuracy and returns the learning rate to use next.
    pub fn observe(&mut self, accuracy: f64) -> f64 {
        match self.best {
            Some(b) if accuracy <= b + self.min_delta => self.stale += 1,
            _ => {
                self.best = Some(accuracy);
                self.stale = 0;
            }
        }
        if self.stale >= self.patience && self.drops < self.max_drops {
            self.lr /= 10.0;
            self.drops += 1;
            self.stale = 0;
        }
        self.lr
    }
}

/// Learning rate after replaying `history` from `lr`.
pub fn plateau_lr(history: &[f64], lr: f64, patience: usize, min_delta: f64, max_drops: usize) -> f64 {
    let mut s = PlateauSchedule::new(lr, patience, min_delta, max_drops);
    history.iter().fold(lr, |_, &a| s.observe(a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn improving_keeps_rate() {
        let h: Vec<f64> = (0..20).map(|i| i as f64 * 0.01).collect();
        assert_eq!(plateau_lr(&h, 0.001, 5, 1e-4, 2), 0.001);
    }

    #[test]
    fn flat_run_drops_once() {
        // First epoch sets the best, five flat epochs after it.
        assert_eq!(plateau_lr(&[0.5; 6], 0.001, 5, 1e-4, 2), 0.0001);
        assert_eq!(plateau_lr(&[0.5; 5], 0.001, 5, 1e-4, 2), 0.001);
        // Gains within min-delta do not count.
        let h = [0.5, 0.50005, 0.50009, 0.5, 0.50002, 0.5];
        assert_eq!(plateau_lr(&h, 0.001, 5, 1e-4, 2), 0.0001);
    }

    #[test]
    fn capped_drops() {
        assert_eq!(plateau_lr(&[0.5; 100], 1.0, 5, 1e-4, 2), 0.01);
        let mut s = PlateauSchedule::new(1.0, 1, 0.0, 2);
        for _ in 0..10 {
            s.observe(0.0);
        }
        assert_eq!(s.drops(), 2);
    }

    proptest! {
        #[test]
        fn never_increases_or_overshoots(h in proptest::collection::vec(0.0f64..1.0, 1..60), patience in 1usize..6) {
            let mut s = PlateauSchedule::new(0.1, patience, 1e-4, 2);
            let mut prev = 0.1;
            for a in h {
                let lr = s.observe(a);
                prop_assert!(lr <= prev);
                prop_assert!(lr >= 0.1 / 100.0 * (1.0 - 1e-12));
                prev = lr;
            }
        }
    }
}
