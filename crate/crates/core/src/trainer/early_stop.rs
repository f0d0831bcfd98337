/// Patience-based early stopping on a metric to maximize.
///
/// An epoch improves when `value - best >= min_delta` (the first epoch
/// always does). Training stops after `patience` consecutive epochs without
/// improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: u32,
    pub min_delta: f64,
    best: Option<f64>,
    best_epoch: u32,
    stale: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: u32, min_delta: f64) -> Self {
        EarlyStopping {
            patience,
            min_delta,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn update(&mut self, epoch: u32, value: f64) -> StopDecision {
        let improved = match self.best {
            None => true,
            Some(b) => value - b >= self.min_delta,
        };
        if improved {
            self.best = Some(value);
            self.best_epoch = epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopDecision {
            improved,
            stop: self.stale >= self.patience,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> u32 {
        self.best_epoch
    }
}

/// Runs a scripted validation curve (epochs numbered from 1) and returns
/// the epoch at which training stops, or `None` if the curve runs out.
pub fn stopping_epoch(curve: &[f64], patience: u32, min_delta: f64) -> Option<u32> {
    let mut es = EarlyStopping::new(patience, min_delta);
    for (i, &v) in curve.iter().enumerate() {
        if es.update(i as u32 + 1, v).stop {
            return Some(i as u32 + 1);
        }
    }
    None
}
