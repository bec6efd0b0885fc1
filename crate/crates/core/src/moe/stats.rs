//! Per-dataset expert participation statistics and top-1 maps.

use super::gate::RoutingDecision;
use super::{MoeError, Result};
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

pub const EXPERT_STATS_SCHEMA: &str = "# gridmoe expert_stats v1";
pub const TOP1_MAP_SCHEMA: &str = "# gridmoe top1_map v1";

/// Participation of each expert in one layer for one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParticipation {
    /// Sum of post-top-k gate weights.
    pub mass: Vec<f64>,
    pub top1: Vec<u64>,
    pub positions: u64,
}

impl LayerParticipation {
    fn new(n: usize) -> Self {
        Self {
            mass: vec![0.0; n],
            top1: vec![0; n],
            positions: 0,
        }
    }

    fn add(&mut self, other: &LayerParticipation) {
        for (a, b) in self.mass.iter_mut().zip(&other.mass) {
            *a += b;
        }
        for (a, b) in self.top1.iter_mut().zip(&other.top1) {
            *a += b;
        }
        self.positions += other.positions;
    }

    /// Shannon entropy (nats) of the normalized participation mass.
    pub fn mass_entropy(&self) -> f64 {
        entropy(&self.mass)
    }

    /// Shannon entropy (nats) of the normalized top-1 counts.
    pub fn top1_entropy(&self) -> f64 {
        entropy(&self.top1.iter().map(|&c| c as f64).collect::<Vec<_>>())
    }
}

fn entropy(weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    weights
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| {
            let p = w / total;
            -p * p.ln()
        })
        .sum()
}

/// Accumulated routing statistics keyed by `(dataset, layer)`.
///
/// Accumulation is additive, so shards can be collected independently and
/// combined with [`ExpertStats::merge`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertStats {
    n_experts: usize,
    layers: BTreeSet<usize>,
    entries: BTreeMap<(String, usize), LayerParticipation>,
}

impl ExpertStats {
    pub fn new(n_experts: usize, layers: impl IntoIterator<Item = usize>) -> Self {
        Self {
            n_experts,
            layers: layers.into_iter().collect(),
            entries: BTreeMap::new(),
        }
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers.iter().copied()
    }

    pub fn datasets(&self) -> BTreeSet<&str> {
        self.entries.keys().map(|(d, _)| d.as_str()).collect()
    }

    pub fn get(&self, dataset: &str, layer: usize) -> Option<&LayerParticipation> {
        self.entries.get(&(dataset.to_string(), layer))
    }

    pub fn accumulate(
        &mut self,
        dataset: &str,
        layer: usize,
        decisions: &[RoutingDecision],
    ) -> Result<()> {
        if !self.layers.contains(&layer) {
            return Err(MoeError::UnknownLayer(layer));
        }
        if let Some(d) = decisions.iter().find(|d| d.n_experts() != self.n_experts) {
            return Err(MoeError::Config(format!(
                "decision over {} experts, statistics track {}",
                d.n_experts(),
                self.n_experts
            )));
        }
        let n = self.n_experts;
        let entry = self
            .entries
            .entry((dataset.to_string(), layer))
            .or_insert_with(|| LayerParticipation::new(n));
        for d in decisions {
            for (&e, &w) in d.selected.iter().zip(&d.gate_weights) {
                entry.mass[e] += w;
            }
            entry.top1[d.top1()] += 1;
            entry.positions += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ExpertStats) -> Result<()> {
        if other.n_experts != self.n_experts {
            return Err(MoeError::Config(format!(
                "cannot merge statistics over {} and {} experts",
                self.n_experts, other.n_experts
            )));
        }
        self.layers.extend(other.layers.iter().copied());
        for (key, part) in &other.entries {
            self.entries
                .entry(key.clone())
                .or_insert_with(|| LayerParticipation::new(self.n_experts))
                .add(part);
        }
        Ok(())
    }

    /// Mean over registered layers of the participation-mass entropy.
    pub fn mean_mass_entropy(&self, dataset: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .layers
            .iter()
            .filter_map(|&l| self.get(dataset, l))
            .map(LayerParticipation::mass_entropy)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// Columns: dataset, layer, expert, participation_mass, top1_count,
    /// grid_positions; preceded by a schema comment line.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut out = out;
        writeln!(out, "{EXPERT_STATS_SCHEMA}")?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "dataset",
            "layer",
            "expert",
            "participation_mass",
            "top1_count",
            "grid_positions",
        ])?;
        for ((dataset, layer), part) in &self.entries {
            for e in 0..self.n_experts {
                w.write_record([
                    dataset.clone(),
                    layer.to_string(),
                    e.to_string(),
                    part.mass[e].to_string(),
                    part.top1[e].to_string(),
                    part.positions.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Top-1 expert at every position of a `height × width` grid.
pub fn export_top1_map(
    decisions: &[RoutingDecision],
    height: usize,
    width: usize,
) -> Result<Vec<Vec<usize>>> {
    if decisions.len() != height * width {
        return Err(MoeError::Coverage {
            expected: height * width,
            got: decisions.len(),
        });
    }
    Ok(decisions
        .chunks(width.max(1))
        .take(height)
        .map(|row| row.iter().map(RoutingDecision::top1).collect())
        .collect())
}

/// Writes a top-1 map as a headerless integer grid after a schema comment.
pub fn write_top1_csv<W: Write>(map: &[Vec<usize>], out: W) -> Result<()> {
    let mut out = out;
    writeln!(out, "{TOP1_MAP_SCHEMA}")?;
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
    for row in map {
        w.write_record(row.iter().map(|e| e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::select_top_k;

    fn uniform(n: usize, k: usize) -> RoutingDecision {
        select_top_k(&vec![1.0 / n as f64; n], k)
    }

    #[test]
    fn uniform_gates_credit_lowest_indices() {
        let mut s = ExpertStats::new(4, [0]);
        s.accumulate("A", 0, &[uniform(4, 2)]).unwrap();
        let p = s.get("A", 0).unwrap();
        assert_eq!(p.mass, vec![0.25, 0.25, 0.0, 0.0]);
        assert_eq!(p.top1, vec![1, 0, 0, 0]);
        assert_eq!(p.positions, 1);
    }

    #[test]
    fn counting_oracle() {
        let w = 0.8;
        let mut probs = vec![(1.0 - w) / 4.0; 5];
        probs[3] = w;
        let d = select_top_k(&probs, 1);
        let mut s = ExpertStats::new(5, [2]);
        s.accumulate("B", 2, &vec![d; 1000]).unwrap();
        let p = s.get("B", 2).unwrap();
        // 1000 additions of w, summed sequentially
        let expected = (0..1000).fold(0.0, |acc, _| acc + w);
        assert_eq!(p.mass[3], expected);
        assert!((p.mass[3] - 1000.0 * w).abs() < 1e-9);
        assert_eq!(p.top1[3], 1000);
        assert_eq!(p.top1.iter().sum::<u64>(), p.positions);
    }

    #[test]
    fn unknown_layer_rejected() {
        let mut s = ExpertStats::new(2, [0, 2]);
        assert!(matches!(
            s.accumulate("A", 1, &[uniform(2, 1)]),
            Err(MoeError::UnknownLayer(1))
        ));
    }

    #[test]
    fn merge_equals_concatenation() {
        let a: Vec<_> = (0..5)
            .map(|i| select_top_k(&[0.1 * i as f64, 0.3, 0.2], 2))
            .collect();
        let b: Vec<_> = (0..4)
            .map(|i| select_top_k(&[0.4, 0.05 * i as f64, 0.5], 1))
            .collect();
        let mut left = ExpertStats::new(3, [0]);
        left.accumulate("A", 0, &a).unwrap();
        let mut right = ExpertStats::new(3, [0]);
        right.accumulate("A", 0, &b).unwrap();
        right.accumulate("C", 0, &a).unwrap();
        left.merge(&right).unwrap();

        let mut whole = ExpertStats::new(3, [0]);
        whole.accumulate("A", 0, &[a.clone(), b].concat()).unwrap();
        whole.accumulate("C", 0, &a).unwrap();
        assert_eq!(left, whole);
    }

    #[test]
    fn top1_map_shapes_and_argmax() {
        let ds = vec![
            select_top_k(&[0.1, 0.9], 1),
            select_top_k(&[0.6, 0.4], 1),
            select_top_k(&[0.5, 0.5], 1),
            select_top_k(&[0.2, 0.8], 2),
        ];
        let map = export_top1_map(&ds, 2, 2).unwrap();
        assert_eq!(map, vec![vec![1, 0], vec![0, 1]]);
        assert!(export_top1_map(&ds, 3, 2).is_err());

        let uniform_map = export_top1_map(&vec![uniform(3, 2); 6], 2, 3).unwrap();
        assert_eq!(uniform_map, vec![vec![0; 3]; 2]);
    }

    #[test]
    fn csv_has_schema_line_and_header() {
        let mut s = ExpertStats::new(2, [0]);
        s.accumulate("A", 0, &[uniform(2, 1)]).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(EXPERT_STATS_SCHEMA));
        assert_eq!(
            lines.next(),
            Some("dataset,layer,expert,participation_mass,top1_count,grid_positions")
        );
        assert_eq!(lines.next(), Some("A,0,0,0.5,1,1"));
    }

    #[test]
    fn entropy_of_uniform_and_point_mass() {
        let p = LayerParticipation {
            mass: vec![1.0, 1.0, 1.0, 1.0],
            top1: vec![4, 0, 0, 0],
            positions: 4,
        };
        assert!((p.mass_entropy() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(p.top1_entropy(), 0.0);
    }
}
