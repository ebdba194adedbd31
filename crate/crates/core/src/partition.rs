//! Splitting one dataset into per-peer datasets.
//!
//! * `iid`: a seeded shuffle cut into near-equal contiguous chunks.
//! * `dirichlet`: for each class, peer proportions drawn from Dir(alpha),
//!   converted to counts by largest-remainder rounding. Draws that leave a
//!   peer empty are redrawn, up to [`DIRICHLET_RETRIES`] times.
//! * `disjoint`: peer `i` receives every sample whose label is in
//!   `label_groups[i]`.
//! * `cla`: peer `i` sees `ceil(C * (i + 1) / N)` randomly chosen classes,
//!   `samples_per_peer` samples spread evenly over them.
//! * `pow`: peer sizes proportional to `rank^-pow_exponent`, scaled to a total
//!   of `N * samples_per_peer`, each filled IID.
//!
//! CLA and POW draw without replacement from one pool, so peers never share
//! a sample.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::seed::{rng_for, STREAM_PARTITION};

pub const DIRICHLET_RETRIES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionKind {
    Iid,
    Dirichlet,
    Disjoint,
    Cla,
    Pow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub kind: PartitionKind,
    pub num_peers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_groups: Option<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples_per_peer: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pow_exponent: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl PartitionSpec {
    pub fn iid(num_peers: usize, seed: u64) -> Self {
        Self::bare(PartitionKind::Iid, num_peers, seed)
    }

    pub fn dirichlet(num_peers: usize, alpha: f64, seed: u64) -> Self {
        Self {
            alpha: Some(alpha),
            ..Self::bare(PartitionKind::Dirichlet, num_peers, seed)
        }
    }

    pub fn disjoint(label_groups: Vec<Vec<usize>>) -> Self {
        Self {
            label_groups: Some(label_groups.clone()),
            ..Self::bare(PartitionKind::Disjoint, label_groups.len(), 0)
        }
    }

    pub fn cla(num_peers: usize, samples_per_peer: usize, seed: u64) -> Self {
        Self {
            samples_per_peer: Some(samples_per_peer),
            ..Self::bare(PartitionKind::Cla, num_peers, seed)
        }
    }

    pub fn pow(num_peers: usize, samples_per_peer: usize, exponent: f64, seed: u64) -> Self {
        Self {
            samples_per_peer: Some(samples_per_peer),
            pow_exponent: Some(exponent),
            ..Self::bare(PartitionKind::Pow, num_peers, seed)
        }
    }

    fn bare(kind: PartitionKind, num_peers: usize, seed: u64) -> Self {
        Self {
            kind,
            num_peers,
            alpha: None,
            label_groups: None,
            samples_per_peer: None,
            pow_exponent: None,
            seed,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_peers < 2 {
            return bad(format!("a partition needs at least 2 peers, got {}", self.num_peers));
        }
        match self.kind {
            PartitionKind::Iid => {}
            PartitionKind::Dirichlet => match self.alpha {
                Some(a) if a > 0.0 && a.is_finite() => {}
                other => return bad(format!("dirichlet needs alpha > 0, got {other:?}")),
            },
            PartitionKind::Disjoint => {
                let Some(groups) = &self.label_groups else {
                    return bad("disjoint partition needs label_groups".into());
                };
                if groups.len() != self.num_peers {
                    return bad(format!(
                        "{} label groups for {} peers",
                        groups.len(),
                        self.num_peers
                    ));
                }
                let mut owner = vec![None; num_classes];
                for (i, g) in groups.iter().enumerate() {
                    if g.is_empty() {
                        return bad(format!("label group {i} is empty"));
                    }
                    for &c in g {
                        if c >= num_classes {
                            return bad(format!("label {c} in group {i} exceeds {num_classes} classes"));
                        }
                        if let Some(j) = owner[c] {
                            return bad(format!("label {c} appears in groups {j} and {i}"));
                        }
                        owner[c] = Some(i);
                    }
                }
            }
            PartitionKind::Cla | PartitionKind::Pow => {
                if !matches!(self.samples_per_peer, Some(n) if n > 0) {
                    return bad(format!("{:?} partition needs samples_per_peer > 0", self.kind));
                }
                if let Some(e) = self.pow_exponent {
                    if !(e > 0.0 && e.is_finite()) {
                        return bad(format!("pow_exponent must be > 0, got {e}"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Largest-remainder rounding of `weights` (any positive scale) to integer
/// counts summing to `total`. Ties go to the lower index.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().take(total.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

fn by_class(labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut pools = vec![Vec::new(); classes];
    for (k, &y) in labels.iter().enumerate() {
        pools[y].push(k);
    }
    pools
}

fn dirichlet_draw(rng: &mut ChaCha8Rng, alpha: f64, n: usize) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(format!("alpha {alpha}: {e}")))?;
    loop {
        let g: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let s: f64 = g.iter().sum();
        // tiny alpha can underflow every component to zero; redraw
        if s > 0.0 && s.is_finite() {
            return Ok(g.into_iter().map(|v| v / s).collect());
        }
    }
}

/// Per-peer sample indices into `dataset`, each list sorted ascending.
pub fn partition_indices(dataset: &Dataset, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    spec.validate(dataset.num_classes)?;
    let n = spec.num_peers;
    let mut rng = rng_for(spec.seed, &[STREAM_PARTITION]);
    let mut parts: Vec<Vec<usize>> = match spec.kind {
        PartitionKind::Iid => {
            let mut all: Vec<usize> = (0..dataset.len()).collect();
            all.shuffle(&mut rng);
            let sizes = largest_remainder(&vec![1.0; n], all.len());
            let mut rest = &all[..];
            sizes
                .iter()
                .map(|&s| {
                    let (head, tail) = rest.split_at(s);
                    rest = tail;
                    head.to_vec()
                })
                .collect()
        }
        PartitionKind::Dirichlet => {
            let alpha = spec.alpha.expect("validated");
            let pools = by_class(&dataset.labels, dataset.num_classes);
            let mut attempt = 0;
            loop {
                let mut parts = vec![Vec::new(); n];
                for pool in &pools {
                    let mut pool = pool.clone();
                    pool.shuffle(&mut rng);
                    let props = dirichlet_draw(&mut rng, alpha, n)?;
                    let counts = largest_remainder(&props, pool.len());
                    let mut rest = &pool[..];
                    for (part, &c) in parts.iter_mut().zip(&counts) {
                        let (head, tail) = rest.split_at(c);
                        part.extend_from_slice(head);
                        rest = tail;
                    }
                }
                if parts.iter().all(|p| !p.is_empty()) {
                    break parts;
                }
                attempt += 1;
                if attempt >= DIRICHLET_RETRIES {
                    return Err(Error::Data(format!(
                        "dirichlet(alpha={alpha}) left a peer empty in {DIRICHLET_RETRIES} draws"
                    )));
                }
            }
        }
        PartitionKind::Disjoint => {
            let groups = spec.label_groups.as_ref().expect("validated");
            let mut owner = vec![None; dataset.num_classes];
            for (i, g) in groups.iter().enumerate() {
                for &c in g {
                    owner[c] = Some(i);
                }
            }
            let mut parts = vec![Vec::new(); n];
            for (k, &y) in dataset.labels.iter().enumerate() {
                match owner[y] {
                    Some(i) => parts[i].push(k),
                    None => {
                        return Err(Error::Config(format!(
                            "label {y} is present in the data but in no label group"
                        )))
                    }
                }
            }
            parts
        }
        PartitionKind::Cla => {
            let per = spec.samples_per_peer.expect("validated");
            let classes = dataset.num_classes;
            let mut pools = by_class(&dataset.labels, classes);
            pools.iter_mut().for_each(|p| p.shuffle(&mut rng));
            (0..n)
                .map(|i| {
                    let k = (classes * (i + 1)).div_ceil(n).clamp(1, classes);
                    let mut chosen: Vec<usize> = (0..classes).collect();
                    chosen.shuffle(&mut rng);
                    chosen.truncate(k);
                    chosen.sort_unstable();
                    let counts = largest_remainder(&vec![1.0; k], per);
                    let mut part = Vec::with_capacity(per);
                    for (&c, &m) in chosen.iter().zip(&counts) {
                        if pools[c].len() < m {
                            return Err(Error::Data(format!(
                                "class {c} has too few samples left for peer {i}"
                            )));
                        }
                        let at = pools[c].len() - m;
                        part.extend(pools[c].drain(at..));
                    }
                    Ok(part)
                })
                .collect::<Result<_>>()?
        }
        PartitionKind::Pow => {
            let per = spec.samples_per_peer.expect("validated");
            let exponent = spec.pow_exponent.unwrap_or(1.0);
            let total = n * per;
            if total > dataset.len() {
                return Err(Error::Data(format!(
                    "pow budget {total} exceeds {} samples",
                    dataset.len()
                )));
            }
            let weights: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-exponent)).collect();
            let sizes = largest_remainder(&weights, total);
            let mut all: Vec<usize> = (0..dataset.len()).collect();
            all.shuffle(&mut rng);
            let mut rest = &all[..total];
            sizes
                .iter()
                .map(|&s| {
                    let (head, tail) = rest.split_at(s);
                    rest = tail;
                    head.to_vec()
                })
                .collect()
        }
    };
    for (i, p) in parts.iter_mut().enumerate() {
        if p.is_empty() {
            return Err(Error::Data(format!("peer {i} received no samples")));
        }
        p.sort_unstable();
    }
    Ok(parts)
}

pub fn partition(dataset: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>> {
    partition_indices(dataset, spec)?
        .iter()
        .map(|idx| dataset.subset(idx))
        .collect()
}

/// Peer-by-class sample counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionStats {
    pub counts: Vec<Vec<usize>>,
}

impl PartitionStats {
    pub fn peer_sizes(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn class_totals(&self) -> Vec<usize> {
        let classes = self.counts.first().map_or(0, Vec::len);
        (0..classes)
            .map(|c| self.counts.iter().map(|r| r[c]).sum())
            .collect()
    }

    /// Rows of `peer_id,class_id,count`, with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("peer_id,class_id,count\n");
        for (p, row) in self.counts.iter().enumerate() {
            for (c, n) in row.iter().enumerate() {
                out.push_str(&format!("{p},{c},{n}\n"));
            }
        }
        out
    }
}

pub fn partition_stats(parts: &[Dataset]) -> PartitionStats {
    PartitionStats {
        counts: parts.iter().map(Dataset::class_counts).collect(),
    }
}
