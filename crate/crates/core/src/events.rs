//! Measurement events on the online time grid.

use serde::{Deserialize, Serialize};

/// Set of output indices (bit `i` set for output `i`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct SignalSet(pub u16);

impl SignalSet {
    pub fn single(i: usize) -> Self {
        Self(1 << i)
    }

    pub fn from_indices(idx: &[usize]) -> Self {
        Self(idx.iter().fold(0, |m, &i| m | (1 << i)))
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0 & (1 << i) != 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..16).filter(|&i| self.contains(i)).collect()
    }

    /// `'1'`/`'0'` per output in index order, e.g. `"111100"`.
    pub fn to_mask(&self, width: usize) -> String {
        (0..width).map(|i| if self.contains(i) { '1' } else { '0' }).collect()
    }

    pub fn parse_mask(s: &str) -> Result<Self, String> {
        let mut m = 0u16;
        for (i, ch) in s.chars().enumerate() {
            match ch {
                '1' => m |= 1 << i,
                '0' => {}
                _ => return Err(format!("signal mask {s:?} may only contain 0 and 1")),
            }
        }
        Ok(Self(m))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MeasurementEvent {
    /// Online values at `t`; `None` marks a missing signal.
    Online { t: f64, values: Vec<Option<f64>> },
    /// A laboratory sample taken at `t` for the given signals.
    SampleDrawn { t: f64, id: u64, signals: SignalSet },
    /// Laboratory results of sample `id` arriving at `t`, as `(signal, value)` pairs.
    OfflineReturn { t: f64, id: u64, values: Vec<(usize, f64)> },
}

impl MeasurementEvent {
    pub fn time(&self) -> f64 {
        match self {
            Self::Online { t, .. } | Self::SampleDrawn { t, .. } | Self::OfflineReturn { t, .. } => *t,
        }
    }

    fn order(&self) -> u8 {
        match self {
            Self::Online { .. } => 0,
            Self::OfflineReturn { .. } => 1,
            Self::SampleDrawn { .. } => 2,
        }
    }
}

/// Events of one grid step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepEvents {
    pub online: Option<Vec<Option<f64>>>,
    pub returns: Vec<(u64, Vec<(usize, f64)>)>,
    pub samples: Vec<(u64, SignalSet)>,
}

/// Index of the grid step at `t`, if `t` lies on the grid.
pub fn grid_index(t: f64, t0: f64, dt: f64) -> Option<usize> {
    let k = ((t - t0) / dt).round();
    if k < 0.0 || ((t - t0) - k * dt).abs() > 1e-6 * dt {
        return None;
    }
    Some(k as usize)
}

/// Bucket a time-ordered event stream by grid step.
pub fn group_by_step(events: &[MeasurementEvent], t0: f64, dt: f64, n_steps: usize) -> Result<Vec<StepEvents>, String> {
    let mut steps = vec![StepEvents::default(); n_steps + 1];
    let mut last = f64::NEG_INFINITY;
    for ev in events {
        let t = ev.time();
        if t < last - 1e-9 {
            return Err(format!("events are not time-ordered at t = {t}"));
        }
        last = t;
        let k = grid_index(t, t0, dt).ok_or_else(|| format!("event at t = {t} is off the grid"))?;
        if k > n_steps {
            continue;
        }
        let s = &mut steps[k];
        match ev {
            MeasurementEvent::Online { values, .. } => {
                if s.online.is_some() {
                    return Err(format!("two online events at t = {t}"));
                }
                s.online = Some(values.clone());
            }
            MeasurementEvent::OfflineReturn { id, values, .. } => s.returns.push((*id, values.clone())),
            MeasurementEvent::SampleDrawn { id, signals, .. } => s.samples.push((*id, *signals)),
        }
    }
    Ok(steps)
}

/// Stable sort by time, then online before returns before samples.
pub fn sort_events(events: &mut [MeasurementEvent]) {
    events.sort_by(|a, b| a.time().total_cmp(&b.time()).then(a.order().cmp(&b.order())));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_roundtrip() {
        let s = SignalSet::from_indices(&[0, 1, 2, 3]);
        assert_eq!(s.to_mask(6), "111100");
        assert_eq!(SignalSet::parse_mask("111100").unwrap(), s);
        assert_eq!(SignalSet::single(5).indices(), vec![5]);
        assert!(SignalSet::parse_mask("12").is_err());
    }

    #[test]
    fn grouping_rejects_off_grid_and_disorder() {
        let dt = 1.0 / 24.0;
        let ok = vec![
            MeasurementEvent::Online { t: dt, values: vec![Some(1.0)] },
            MeasurementEvent::SampleDrawn { t: dt, id: 1, signals: SignalSet::single(0) },
            MeasurementEvent::OfflineReturn { t: 3.0 * dt, id: 1, values: vec![(0, 2.0)] },
        ];
        let g = group_by_step(&ok, 0.0, dt, 5).unwrap();
        assert!(g[1].online.is_some());
        assert_eq!(g[3].returns.len(), 1);
        let off = vec![MeasurementEvent::Online { t: 0.5 * dt, values: vec![] }];
        assert!(group_by_step(&off, 0.0, dt, 5).is_err());
        let mut rev = ok.clone();
        rev.reverse();
        assert!(group_by_step(&rev, 0.0, dt, 5).is_err());
        sort_events(&mut rev);
        assert_eq!(rev, ok);
    }
}
