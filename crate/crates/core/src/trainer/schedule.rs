/// Plateau halving and early stopping on a metric that should increase.
///
/// The running best starts at 0, so an epoch counts as an improvement only
/// when its value is strictly above every earlier one and above 0.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub factor: f64,
    pub plateau_epochs: usize,
    pub patience: usize,
    best: f64,
    plateau: usize,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ScheduleEvent {
    pub improved: bool,
    pub halved: bool,
    pub stop: bool,
}

impl PlateauSchedule {
    pub fn new(lr: f64, factor: f64, plateau_epochs: usize, patience: usize) -> Self {
        PlateauSchedule {
            lr,
            factor,
            plateau_epochs,
            patience,
            best: 0.0,
            plateau: 0,
            stale: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Records one epoch's metric; the plateau counter resets on improvement and on halving.
    pub fn observe(&mut self, value: f64) -> ScheduleEvent {
        let mut ev = ScheduleEvent::default();
        if value > self.best {
            self.best = value;
            self.plateau = 0;
            self.stale = 0;
            ev.improved = true;
            return ev;
        }
        self.plateau += 1;
        self.stale += 1;
        if self.plateau >= self.plateau_epochs {
            self.lr *= self.factor;
            self.plateau = 0;
            ev.halved = true;
        }
        ev.stop = self.stale >= self.patience;
        ev
    }
}
