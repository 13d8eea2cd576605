//! Per-cell surface bookkeeping: visibility segments, their representative
//! observations, layer labels and the fused layers derived from them.
//!
//! A column keeps every observation it has received. Layers are a pure
//! function of that history, so adding or removing a keyframe's observation
//! and recomputing gives the same result as building the column from scratch.

use std::ops::Range;

use crate::error::Result;
use crate::gaussian::{overlap_rate, Gaussian, SurfaceLayer};

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    /// Overlap rate above which two surfaces are the same layer.
    pub epsilon: f64,
    /// Optional altitude gap (meters) beyond which surfaces are always
    /// separate layers, checked before the overlap rate.
    pub min_altitude_gap: Option<f64>,
    /// Observations kept per visibility segment; the farthest are dropped.
    pub max_observations_per_segment: usize,
    /// Occupancy log-odds clamp for fused layers.
    pub l_max: f32,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            epsilon: 0.6,
            min_altitude_gap: None,
            max_observations_per_segment: 512,
            l_max: (0.97f32 / 0.03).ln(),
        }
    }
}

/// One keyframe's view of one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    /// Integration index of the keyframe; also the time coordinate.
    pub ordinal: u32,
    pub gaussian: Gaussian,
    /// Horizontal sensor-to-cell distance.
    pub distance: f64,
    /// Occupancy log-odds the keyframe's 2D grid assigned to the cell.
    pub occupancy: f32,
}

/// The closest observation of one visibility segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Representative {
    pub ordinal: u32,
    pub gaussian: Gaussian,
    pub distance: f64,
    pub label: u32,
    /// False while the cell is still inside the latest keyframe's footprint.
    pub closed: bool,
}

/// Splits observations (sorted by ordinal) into runs of consecutive ordinals.
pub fn visibility_segments(ordinals: &[u32]) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=ordinals.len() {
        if i == ordinals.len() || ordinals[i] != ordinals[i - 1] + 1 {
            if i > start {
                out.push(start..i);
            }
            start = i;
        }
    }
    out
}

/// Labels representatives sorted by ascending mean: the lowest gets 1, each
/// next one keeps the previous label when the two overlap by more than
/// `epsilon`, otherwise takes the next label.
pub fn assign_layer_labels(reps: &[Gaussian], epsilon: f64, min_altitude_gap: Option<f64>) -> Result<Vec<u32>> {
    let mut labels = Vec::with_capacity(reps.len());
    for (i, r) in reps.iter().enumerate() {
        if i == 0 {
            labels.push(1);
            continue;
        }
        let prev = &reps[i - 1];
        let separate_by_gap = min_altitude_gap.is_some_and(|g| (r.mu - prev.mu).abs() > g);
        let same = !separate_by_gap && overlap_rate(prev, r)? > epsilon;
        labels.push(labels[i - 1] + u32::from(!same));
    }
    Ok(labels)
}

/// A representative as seen by [`assign_observation_label`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledRep {
    pub time: f64,
    pub mu: f64,
    pub label: u32,
}

/// Label for an observation at time `t` with mean `mu`, given representatives
/// sorted by time. Before the first representative it takes the first label,
/// from the last one on it takes the last label; in between it joins the
/// bracketing representative with the nearer mean, the earlier one on ties.
pub fn assign_observation_label(t: f64, mu: f64, reps: &[LabeledRep]) -> u32 {
    debug_assert!(!reps.is_empty());
    let last = reps.len() - 1;
    if t < reps[0].time {
        return reps[0].label;
    }
    if t >= reps[last].time {
        return reps[last].label;
    }
    // First representative strictly after t; t sits in [j, j + 1).
    let next = reps.partition_point(|r| r.time <= t);
    let (a, b) = (&reps[next - 1], &reps[next]);
    if (a.mu - mu).abs() <= (b.mu - mu).abs() {
        a.label
    } else {
        b.label
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CellColumn {
    /// Fused surfaces, ascending by altitude, labelled 1..=Z.
    pub layers: Vec<SurfaceLayer>,
    /// One per visibility segment, in time order.
    pub representatives: Vec<Representative>,
    history: Vec<Observation>,
}

/// Derived state of a column, computed from its history.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnState {
    pub layers: Vec<SurfaceLayer>,
    pub representatives: Vec<Representative>,
}

impl CellColumn {
    /// A column restored from a stored map: layers only, no history.
    pub fn from_layers(layers: Vec<SurfaceLayer>) -> Self {
        CellColumn {
            layers,
            representatives: Vec::new(),
            history: Vec::new(),
        }
    }

    pub fn history(&self) -> &[Observation] {
        &self.history
    }

    pub fn open_segment(&self) -> Option<&Representative> {
        self.representatives.last().filter(|r| !r.closed)
    }

    pub fn closed_representatives(&self) -> impl Iterator<Item = &Representative> {
        self.representatives.iter().filter(|r| r.closed)
    }

    /// Inserts an observation in ordinal order, replacing any earlier one
    /// from the same keyframe, and enforces the per-segment cap.
    pub fn insert(&mut self, obs: Observation, cap: usize) {
        match self.history.binary_search_by_key(&obs.ordinal, |o| o.ordinal) {
            Ok(i) => self.history[i] = obs,
            Err(i) => self.history.insert(i, obs),
        }
        if self.history.len() <= cap {
            return;
        }
        let ordinals: Vec<u32> = self.history.iter().map(|o| o.ordinal).collect();
        if let Some(seg) = visibility_segments(&ordinals)
            .into_iter()
            .find(|s| ordinals[s.clone()].contains(&obs.ordinal) && s.len() > cap)
        {
            let far = seg
                .clone()
                .max_by(|&a, &b| {
                    self.history[a]
                        .distance
                        .total_cmp(&self.history[b].distance)
                        .then(b.cmp(&a))
                })
                .unwrap();
            self.history.remove(far);
        }
    }

    /// Removes the observation made by keyframe `ordinal`, if any.
    pub fn remove(&mut self, ordinal: u32) -> bool {
        match self.history.binary_search_by_key(&ordinal, |o| o.ordinal) {
            Ok(i) => {
                self.history.remove(i);
                true
            }
            Err(_) => false,
        }
    }

    /// Recomputes representatives, labels and fused layers from history.
    /// `latest` is the ordinal of the most recent keyframe in the atlas.
    pub fn compute(&self, config: &FusionConfig, latest: u32) -> Result<ColumnState> {
        if self.history.is_empty() {
            return Ok(ColumnState {
                layers: Vec::new(),
                representatives: Vec::new(),
            });
        }
        let ordinals: Vec<u32> = self.history.iter().map(|o| o.ordinal).collect();
        let mut reps: Vec<Representative> = visibility_segments(&ordinals)
            .into_iter()
            .map(|seg| {
                let best = seg
                    .clone()
                    .min_by(|&a, &b| {
                        self.history[a]
                            .distance
                            .total_cmp(&self.history[b].distance)
                            .then(a.cmp(&b))
                    })
                    .unwrap();
                let o = &self.history[best];
                Representative {
                    ordinal: o.ordinal,
                    gaussian: o.gaussian,
                    distance: o.distance,
                    label: 0,
                    closed: ordinals[seg.end - 1] < latest,
                }
            })
            .collect();

        // Label in altitude order, ties broken by time.
        let mut by_mu: Vec<usize> = (0..reps.len()).collect();
        by_mu.sort_by(|&a, &b| reps[a].gaussian.mu.total_cmp(&reps[b].gaussian.mu).then(a.cmp(&b)));
        let sorted: Vec<Gaussian> = by_mu.iter().map(|&i| reps[i].gaussian).collect();
        let labels = assign_layer_labels(&sorted, config.epsilon, config.min_altitude_gap)?;
        for (k, &i) in by_mu.iter().enumerate() {
            reps[i].label = labels[k];
        }
        let n_labels = *labels.iter().max().unwrap() as usize;

        let timeline: Vec<LabeledRep> = reps
            .iter()
            .map(|r| LabeledRep {
                time: r.ordinal as f64,
                mu: r.gaussian.mu,
                label: r.label,
            })
            .collect();
        let mut fused: Vec<Option<SurfaceLayer>> = vec![None; n_labels];
        for o in &self.history {
            let f = assign_observation_label(o.ordinal as f64, o.gaussian.mu, &timeline) as usize - 1;
            fused[f] = Some(match fused[f] {
                None => SurfaceLayer {
                    occupancy: o.occupancy,
                    ..SurfaceLayer::from_observation(o.gaussian, 0)
                },
                Some(l) => {
                    let g = l.gaussian().fuse(&o.gaussian);
                    SurfaceLayer {
                        mu: g.mu,
                        sigma: g.sigma,
                        n_obs: l.n_obs + 1,
                        label: 0,
                        occupancy: l.occupancy + o.occupancy,
                    }
                }
            });
        }
        let mut layers: Vec<SurfaceLayer> = fused.into_iter().flatten().collect();
        layers.sort_by(|a, b| a.mu.total_cmp(&b.mu));

        // Fused layers can drift together; merge any adjacent pair that now
        // overlaps so surviving neighbours are always distinct.
        let mut i = 0;
        while i + 1 < layers.len() {
            let (a, b) = (layers[i], layers[i + 1]);
            let gap_split = config.min_altitude_gap.is_some_and(|g| (b.mu - a.mu).abs() > g);
            if !gap_split && overlap_rate(&a.gaussian(), &b.gaussian())? > config.epsilon {
                let g = a.gaussian().fuse(&b.gaussian());
                layers[i] = SurfaceLayer {
                    mu: g.mu,
                    sigma: g.sigma,
                    n_obs: a.n_obs + b.n_obs,
                    label: 0,
                    occupancy: a.occupancy + b.occupancy,
                };
                layers.remove(i + 1);
                i = i.saturating_sub(1);
            } else {
                i += 1;
            }
        }
        for (k, l) in layers.iter_mut().enumerate() {
            l.label = k as u32 + 1;
            l.occupancy = l.occupancy.clamp(-config.l_max, config.l_max);
        }
        Ok(ColumnState {
            layers,
            representatives: reps,
        })
    }

    pub fn apply(&mut self, state: ColumnState) {
        self.layers = state.layers;
        self.representatives = state.representatives;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(mu: f64, sigma: f64) -> Gaussian {
        Gaussian::new(mu, sigma).unwrap()
    }

    fn obs(ordinal: u32, mu: f64, sigma: f64, distance: f64) -> Observation {
        Observation {
            ordinal,
            gaussian: g(mu, sigma),
            distance,
            occupancy: -0.8,
        }
    }

    #[test]
    fn representative_is_the_closest_observation() {
        let mut c = CellColumn::default();
        for (k, d) in [10.0, 4.0, 7.0].into_iter().enumerate() {
            c.insert(obs(k as u32, k as f64 * 0.01, 0.3, d), 512);
        }
        let s = c.compute(&FusionConfig::default(), 2).unwrap();
        assert_eq!(s.representatives.len(), 1);
        assert_eq!(s.representatives[0].distance, 4.0);
        assert!(!s.representatives[0].closed);

        let mut one = CellColumn::default();
        one.insert(obs(0, 1.0, 0.3, 3.0), 512);
        let s = one.compute(&FusionConfig::default(), 0).unwrap();
        assert_eq!(s.representatives[0].gaussian, g(1.0, 0.3));
    }

    #[test]
    fn a_gap_closes_the_segment() {
        // Seen at keyframes 0-2 (closest at 1), missed at 3-4, seen again at 5-6.
        let mut c = CellColumn::default();
        for (k, d) in [(0, 6.0), (1, 2.0), (2, 5.0), (5, 9.0), (6, 3.0)] {
            c.insert(obs(k, 0.0, 0.3, d), 512);
        }
        c.apply(c.compute(&FusionConfig::default(), 6).unwrap());
        let closed: Vec<_> = c.closed_representatives().map(|r| r.ordinal).collect();
        assert_eq!(closed, vec![1]);
        assert_eq!(c.open_segment().unwrap().ordinal, 6);
        c.apply(c.compute(&FusionConfig::default(), 7).unwrap());
        assert!(c.open_segment().is_none());
        assert_eq!(visibility_segments(&[0, 1, 2, 5, 6, 9]), vec![0..3, 3..5, 5..6]);
        assert!(visibility_segments(&[]).is_empty());
    }

    #[test]
    fn layer_label_rules() {
        assert_eq!(
            assign_layer_labels(&[g(0.0, 0.5), g(0.05, 0.5)], 0.6, None).unwrap(),
            vec![1, 1]
        );
        assert_eq!(
            assign_layer_labels(&[g(0.0, 0.5), g(5.0, 0.5)], 0.6, None).unwrap(),
            vec![1, 2]
        );
        assert_eq!(assign_layer_labels(&[g(3.0, 0.5)], 0.6, None).unwrap(), vec![1]);
        assert_eq!(
            assign_layer_labels(&[g(0.0, 0.5), g(0.05, 0.5)], 0.6, Some(0.01)).unwrap(),
            vec![1, 2]
        );
    }

    #[test]
    fn observation_label_rules() {
        let reps = [
            LabeledRep {
                time: 2.0,
                mu: 0.0,
                label: 1,
            },
            LabeledRep {
                time: 6.0,
                mu: 5.0,
                label: 2,
            },
        ];
        assert_eq!(assign_observation_label(1.0, 4.9, &reps), 1);
        assert_eq!(assign_observation_label(6.0, 0.0, &reps), 2);
        assert_eq!(assign_observation_label(9.0, 0.0, &reps), 2);
        assert_eq!(assign_observation_label(3.0, 0.3, &reps), 1);
        assert_eq!(assign_observation_label(3.0, 4.7, &reps), 2);
        assert_eq!(assign_observation_label(3.0, 2.5, &reps), 1);
    }

    #[test]
    fn two_levels_stay_apart_and_revisits_merge() {
        let mut c = CellColumn::default();
        // over, under, over again
        let plan = [
            (0, 5.0),
            (1, 5.0),
            (2, 5.0),
            (10, 0.0),
            (11, 0.0),
            (20, 5.02),
            (21, 5.01),
        ];
        for (k, mu) in plan {
            c.insert(obs(k, mu, 0.4, 3.0 + k as f64 % 2.0), 512);
        }
        let s = c.compute(&FusionConfig::default(), 21).unwrap();
        assert_eq!(s.layers.len(), 2);
        assert_eq!(s.layers[0].n_obs, 2);
        assert_eq!(s.layers[1].n_obs, 5);
        assert_eq!((s.layers[0].label, s.layers[1].label), (1, 2));
        for w in s.layers.windows(2) {
            assert!(overlap_rate(&w[0].gaussian(), &w[1].gaussian()).unwrap() <= 0.6);
        }
    }

    #[test]
    fn repeated_identical_observations_shrink_sigma() {
        let mut c = CellColumn::default();
        for k in 0..9 {
            c.insert(obs(k, 1.5, 0.3, 2.0), 512);
        }
        let s = c.compute(&FusionConfig::default(), 8).unwrap();
        assert_eq!(s.layers.len(), 1);
        assert!((s.layers[0].sigma - 0.1).abs() < 1e-12);
        assert_eq!(s.layers[0].mu, 1.5);
        assert_eq!(s.layers[0].occupancy, -FusionConfig::default().l_max.min(9.0 * 0.8));
    }

    #[test]
    fn cap_drops_the_farthest_observation() {
        let mut c = CellColumn::default();
        for k in 0..5 {
            c.insert(obs(k, 0.0, 0.3, [3.0, 9.0, 1.0, 4.0, 2.0][k as usize]), 4);
        }
        let kept: Vec<u32> = c.history().iter().map(|o| o.ordinal).collect();
        assert_eq!(kept, vec![0, 2, 3, 4]);
    }

    #[test]
    fn remove_then_reinsert_is_identity() {
        let mut c = CellColumn::default();
        for k in 0..6 {
            c.insert(obs(k, k as f64 * 0.7, 0.3, 2.0), 512);
        }
        let cfg = FusionConfig::default();
        let before = c.compute(&cfg, 5).unwrap();
        let o = c.history()[3];
        assert!(c.remove(3));
        assert!(!c.remove(3));
        c.insert(o, 512);
        assert_eq!(c.compute(&cfg, 5).unwrap(), before);
    }
}
