//! Synthetic group/class mixtures and client partitioners.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Position in the generated pool; stable across partitioning.
    pub id: usize,
    pub x: Vec<f64>,
    pub label: usize,
    /// Ground-truth mixture component, hidden from training.
    pub group: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pool {
    pub samples: Vec<Sample>,
    pub groups: usize,
    pub classes: usize,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub groups: usize,
    pub classes: usize,
    pub dim: usize,
    /// Row-major `[groups * classes]` cell means.
    pub means: Vec<Vec<f64>>,
    pub sigma: f64,
    /// Samples per `(group, class)` cell; zero cells are allowed.
    pub cell_counts: Vec<usize>,
}

impl MixtureSpec {
    pub fn cell(&self, g: usize, c: usize) -> usize {
        g * self.classes + c
    }

    pub fn validate(&self) -> Result<()> {
        let cells = self.groups * self.classes;
        if self.groups == 0 || self.classes == 0 || self.dim == 0 {
            return Err(Error::Config("mixture needs groups, classes and dim > 0".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("noise sigma must be positive, got {}", self.sigma)));
        }
        if self.means.len() != cells || self.cell_counts.len() != cells {
            return Err(Error::Config(format!("mixture needs {cells} cell means and counts")));
        }
        if self.means.iter().any(|m| m.len() != self.dim) {
            return Err(Error::Config("cell mean dimension mismatch".into()));
        }
        Ok(())
    }

    /// Count-weighted mean of each group's cells.
    pub fn group_means(&self) -> Vec<Vec<f64>> {
        (0..self.groups)
            .map(|g| {
                let mut m = vec![0.0; self.dim];
                let mut total = 0usize;
                for c in 0..self.classes {
                    let i = self.cell(g, c);
                    total += self.cell_counts[i];
                    for (a, b) in m.iter_mut().zip(&self.means[i]) {
                        *a += b * self.cell_counts[i] as f64;
                    }
                }
                m.iter_mut().for_each(|v| *v /= total.max(1) as f64);
                m
            })
            .collect()
    }

    /// Minimum pairwise group-mean distance in units of sigma.
    pub fn separation(&self) -> f64 {
        let gm = self.group_means();
        let mut best = f64::INFINITY;
        for a in 0..gm.len() {
            for b in a + 1..gm.len() {
                let d: f64 = gm[a].iter().zip(&gm[b]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                best = best.min(d / self.sigma);
            }
        }
        best
    }

    /// Groups on orthogonal directions `radius` from the origin, classes
    /// offset within each group by `class_spread`. `membership[g]` lists the
    /// classes present in group `g`; other cells stay empty.
    pub fn orthogonal_groups(
        groups: usize,
        classes: usize,
        dim: usize,
        radius: f64,
        class_spread: f64,
        sigma: f64,
        per_cell: usize,
        membership: &[Vec<usize>],
        seed: u64,
    ) -> Result<Self> {
        if groups > dim {
            return Err(Error::Config(format!("{groups} orthogonal groups need dim >= {groups}")));
        }
        if membership.len() != groups {
            return Err(Error::Config("membership must list classes for every group".into()));
        }
        let mut rng = rng_for(seed, &[0x313E]);
        let centers = random_orthonormal(groups, dim, &mut rng);
        let mut means = Vec::with_capacity(groups * classes);
        let mut cell_counts = vec![0; groups * classes];
        for (g, center) in centers.iter().enumerate() {
            for c in 0..classes {
                let dir = random_unit(dim, &mut rng);
                means.push(
                    center
                        .iter()
                        .zip(&dir)
                        .map(|(a, b)| radius * a + class_spread * b)
                        .collect(),
                );
                if membership[g].contains(&c) {
                    cell_counts[g * classes + c] = per_cell;
                }
            }
        }
        let spec = Self {
            groups,
            classes,
            dim,
            means,
            sigma,
            cell_counts,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn total(&self) -> usize {
        self.cell_counts.iter().sum()
    }
}

fn random_unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn random_orthonormal<R: Rng + ?Sized>(k: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v = random_unit(dim, rng);
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Gaussian samples around each cell mean, cells in `(group, class)` order.
pub fn gen_mixture(spec: &MixtureSpec, seed: u64) -> Result<Pool> {
    spec.validate()?;
    let mut rng = rng_for(seed, &[0x6E11]);
    let mut samples = Vec::with_capacity(spec.total());
    for g in 0..spec.groups {
        for c in 0..spec.classes {
            let i = spec.cell(g, c);
            for _ in 0..spec.cell_counts[i] {
                let x = spec.means[i]
                    .iter()
                    .map(|m| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + spec.sigma * z
                    })
                    .collect();
                samples.push(Sample {
                    id: samples.len(),
                    x,
                    label: c,
                    group: g,
                });
            }
        }
    }
    Ok(Pool {
        samples,
        groups: spec.groups,
        classes: spec.classes,
        dim: spec.dim,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub samples: Vec<Sample>,
    /// `pi[g] == N_g / N` for this shard.
    pub pi: Vec<f64>,
    pub seed: u64,
}

impl ClientShard {
    pub fn new(client_id: usize, samples: Vec<Sample>, groups: usize, seed: u64) -> Self {
        let pi = group_fractions(&samples, groups);
        Self {
            client_id,
            samples,
            pi,
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn group_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.pi.len()];
        for s in &self.samples {
            counts[s.group] += 1;
        }
        counts
    }

    pub fn label_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Per-label split into `(train, test)`; each label contributes
    /// `round(n * test_frac)` samples to test, in shuffled order.
    pub fn split(&self, test_frac: f64, seed: u64) -> (ClientShard, ClientShard) {
        let mut rng = rng_for(seed, &[0x5B17, self.client_id as u64]);
        let mut by_label: BTreeMap<usize, Vec<&Sample>> = BTreeMap::new();
        for s in &self.samples {
            by_label.entry(s.label).or_default().push(s);
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (_, mut v) in by_label {
            v.shuffle(&mut rng);
            let k = (v.len() as f64 * test_frac).round() as usize;
            test.extend(v[..k].iter().map(|s| (*s).clone()));
            train.extend(v[k..].iter().map(|s| (*s).clone()));
        }
        train.sort_by_key(|s| s.id);
        test.sort_by_key(|s| s.id);
        let g = self.pi.len();
        (
            ClientShard::new(self.client_id, train, g, self.seed),
            ClientShard::new(self.client_id, test, g, self.seed),
        )
    }
}

fn group_fractions(samples: &[Sample], groups: usize) -> Vec<f64> {
    let mut counts = vec![0usize; groups];
    for s in samples {
        counts[s.group] += 1;
    }
    let n = samples.len();
    counts
        .iter()
        .map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
        .collect()
}

/// Splits `total` units by `weights` using largest-remainder rounding.
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || !(sum > 0.0) {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn by_key(pool: &Pool, key: impl Fn(&Sample) -> usize, buckets: usize) -> Vec<Vec<&Sample>> {
    let mut out = vec![Vec::new(); buckets];
    for s in &pool.samples {
        out[key(s)].push(s);
    }
    out
}

/// Label skew: each client holds exactly `s` classes; class `c` is divided
/// among its holders in proportion to `a_{i,c} ~ U(0.4, 0.6)`.
pub fn pathological_partition(pool: &Pool, clients: usize, s: usize, seed: u64) -> Result<Vec<ClientShard>> {
    let c = pool.classes;
    if s == 0 || s > c {
        return Err(Error::Config(format!("classes per client s = {s} must be in 1..={c} (C = {c})")));
    }
    if clients == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if clients * s < c {
        return Err(Error::Config(format!(
            "{clients} clients x {s} classes cannot cover all {c} classes"
        )));
    }
    let mut rng = rng_for(seed, &[0x9A74]);
    let mut assignment: Vec<Vec<usize>> = Vec::new();
    for attempt in 0.. {
        if attempt == 1000 {
            return Err(Error::Config("could not assign classes so that every class has a holder".into()));
        }
        assignment = (0..clients)
            .map(|_| {
                let mut v = index::sample(&mut rng, c, s).into_vec();
                v.sort_unstable();
                v
            })
            .collect();
        let mut held = vec![false; c];
        assignment.iter().flatten().for_each(|&k| held[k] = true);
        if held.iter().all(|&h| h) {
            break;
        }
    }
    let rates: Vec<Vec<f64>> = assignment
        .iter()
        .map(|cls| cls.iter().map(|_| rng.random_range(0.4..0.6)).collect())
        .collect();

    let mut per_client: Vec<Vec<Sample>> = vec![Vec::new(); clients];
    for (class, mut members) in by_key(pool, |s| s.label, c).into_iter().enumerate() {
        members.shuffle(&mut rng);
        let holders: Vec<(usize, f64)> = assignment
            .iter()
            .enumerate()
            .filter_map(|(i, cls)| cls.iter().position(|&k| k == class).map(|p| (i, rates[i][p])))
            .collect();
        let weights: Vec<f64> = holders.iter().map(|h| h.1).collect();
        let counts = largest_remainder(members.len(), &weights);
        let mut it = members.into_iter();
        for ((client, _), n) in holders.iter().zip(counts) {
            per_client[*client].extend(it.by_ref().take(n).cloned());
        }
    }
    Ok(finish(per_client, pool.groups, seed))
}

fn finish(per_client: Vec<Vec<Sample>>, groups: usize, seed: u64) -> Vec<ClientShard> {
    per_client
        .into_iter()
        .enumerate()
        .map(|(i, mut v)| {
            v.sort_by_key(|s| s.id);
            ClientShard::new(i, v, groups, seed)
        })
        .collect()
}

/// Symmetric Dirichlet draw via normalized Gamma variates.
pub fn dirichlet<R: Rng + ?Sized>(k: usize, concentration: f64, rng: &mut R) -> Result<Vec<f64>> {
    let gamma = Gamma::new(concentration, 1.0)
        .map_err(|e| Error::Config(format!("bad Dirichlet concentration {concentration}: {e}")))?;
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        return Ok(draws.into_iter().map(|d| d / sum).collect());
    }
    // All draws underflowed; the limit is a one-hot vector.
    let mut v = vec![0.0; k];
    v[rng.random_range(0..k)] = 1.0;
    Ok(v)
}

/// Mixture heterogeneity: client mixing vectors `pi_i ~ Dir(concentration)`;
/// each group's samples are divided among clients in proportion to `pi_{i,g}`.
/// Stored `pi` is recomputed from the realized allocation.
pub fn mixture_partition(pool: &Pool, clients: usize, concentration: f64, seed: u64) -> Result<Vec<ClientShard>> {
    if !(concentration > 0.0) {
        return Err(Error::Config(format!("concentration must be positive, got {concentration}")));
    }
    if clients == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    let mut rng = rng_for(seed, &[0xD171]);
    let mixing: Vec<Vec<f64>> = (0..clients)
        .map(|_| dirichlet(pool.groups, concentration, &mut rng))
        .collect::<Result<_>>()?;
    let mut per_client: Vec<Vec<Sample>> = vec![Vec::new(); clients];
    for (g, mut members) in by_key(pool, |s| s.group, pool.groups).into_iter().enumerate() {
        members.shuffle(&mut rng);
        let weights: Vec<f64> = mixing.iter().map(|pi| pi[g]).collect();
        let counts = largest_remainder(members.len(), &weights);
        let mut it = members.into_iter();
        for (client, n) in counts.into_iter().enumerate() {
            per_client[client].extend(it.by_ref().take(n).cloned());
        }
    }
    if let Some(i) = per_client.iter().position(Vec::is_empty) {
        return Err(Error::Config(format!(
            "pool of {} samples too small: client {i} received no data",
            pool.samples.len()
        )));
    }
    Ok(finish(per_client, pool.groups, seed))
}

/// Per-client feature transform `x -> A x + shift`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainTransform {
    /// Row-major `dim x dim`; `None` means identity.
    pub matrix: Option<Vec<f64>>,
    pub shift: Vec<f64>,
}

impl DomainTransform {
    pub fn identity(dim: usize) -> Self {
        Self {
            matrix: None,
            shift: vec![0.0; dim],
        }
    }

    pub fn shift(shift: Vec<f64>) -> Self {
        Self { matrix: None, shift }
    }

    /// Near-identity random linear map plus a shift of norm `shift_norm`.
    pub fn random(dim: usize, jitter: f64, shift_norm: f64, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[0xD0AA]);
        let mut m = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                let z: f64 = StandardNormal.sample(&mut rng);
                m[i * dim + j] = if i == j { 1.0 } else { 0.0 } + jitter * z;
            }
        }
        let dir = random_unit(dim, &mut rng);
        Self {
            matrix: Some(m),
            shift: dir.into_iter().map(|v| v * shift_norm).collect(),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = x.len();
        if self.shift.len() != d || self.matrix.as_ref().is_some_and(|m| m.len() != d * d) {
            return Err(Error::shape("domain transform", format!("sample dim {d}")));
        }
        Ok(match &self.matrix {
            None => x.iter().zip(&self.shift).map(|(a, b)| a + b).collect(),
            Some(m) => (0..d)
                .map(|i| m[i * d..(i + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.shift[i])
                .collect(),
        })
    }
}

/// Feature heterogeneity: every client gets a class-balanced slice of the
/// pool passed through its own transform. The domain index becomes the group.
pub fn domain_partition(
    pool: &Pool,
    clients: usize,
    transforms: &[DomainTransform],
    seed: u64,
) -> Result<Vec<ClientShard>> {
    if transforms.len() != clients {
        return Err(Error::Config(format!(
            "{} domain transforms for {clients} clients",
            transforms.len()
        )));
    }
    if clients == 0 {
        return Err(Error::Config("need at least one domain transform".into()));
    }
    let mut rng = rng_for(seed, &[0xD03A]);
    let mut per_client: Vec<Vec<Sample>> = vec![Vec::new(); clients];
    for (class, mut members) in by_key(pool, |s| s.label, pool.classes).into_iter().enumerate() {
        if members.len() < clients {
            return Err(Error::Config(format!(
                "class {class} has {} samples, fewer than {clients} domains",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for (k, s) in members.into_iter().enumerate() {
            let i = k % clients;
            let mut s = s.clone();
            s.x = transforms[i].apply(&s.x)?;
            s.group = i;
            per_client[i].push(s);
        }
    }
    Ok(finish(per_client, clients, seed))
}

/// Mean total-variation distance between client label histograms and the
/// histogram of all shards combined.
pub fn label_tv_distance(shards: &[ClientShard], classes: usize) -> f64 {
    let mut global = vec![0.0; classes];
    let mut total = 0.0;
    for s in shards {
        for (g, c) in global.iter_mut().zip(s.label_counts(classes)) {
            *g += c as f64;
        }
        total += s.len() as f64;
    }
    global.iter_mut().for_each(|g| *g /= total);
    let tv: f64 = shards
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| {
            let n = s.len() as f64;
            0.5 * s
                .label_counts(classes)
                .iter()
                .zip(&global)
                .map(|(&c, g)| (c as f64 / n - g).abs())
                .sum::<f64>()
        })
        .sum();
    tv / shards.len() as f64
}

pub const SHARD_FORMAT: &str = "promptfed-shard/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardHeader {
    pub format: String,
    pub client_id: usize,
    pub pi: Vec<f64>,
    pub group_counts: Vec<usize>,
    pub seed: u64,
    pub samples: usize,
    pub dim: usize,
}

/// One JSON header line, then little-endian arrays: `f64` samples
/// (`samples * dim`), `u32` labels, `u32` groups, `u64` pool ids.
pub fn write_shard(path: &Path, shard: &ClientShard) -> Result<()> {
    let dim = shard.samples.first().map_or(0, |s| s.x.len());
    let header = ShardHeader {
        format: SHARD_FORMAT.into(),
        client_id: shard.client_id,
        pi: shard.pi.clone(),
        group_counts: shard.group_counts(),
        seed: shard.seed,
        samples: shard.len(),
        dim,
    };
    let mut buf = serde_json::to_vec(&header).map_err(|e| Error::format("shard header", e.to_string()))?;
    buf.push(b'\n');
    for s in &shard.samples {
        if s.x.len() != dim {
            return Err(Error::shape("write_shard", "ragged sample dimensions"));
        }
        s.x.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    }
    for s in &shard.samples {
        buf.extend_from_slice(&(s.label as u32).to_le_bytes());
    }
    for s in &shard.samples {
        buf.extend_from_slice(&(s.group as u32).to_le_bytes());
    }
    for s in &shard.samples {
        buf.extend_from_slice(&(s.id as u64).to_le_bytes());
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

pub fn read_shard(path: &Path) -> Result<ClientShard> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let header: ShardHeader =
        serde_json::from_str(line.trim_end()).map_err(|e| Error::format("shard header", e.to_string()))?;
    if header.format != SHARD_FORMAT {
        return Err(Error::format("shard header", format!("unknown format {}", header.format)));
    }
    let (n, d) = (header.samples, header.dim);
    let mut body = Vec::new();
    reader.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    let expected = n * d * 8 + n * 4 + n * 4 + n * 8;
    if body.len() != expected {
        return Err(Error::format("shard body", format!("{} bytes, expected {expected}", body.len())));
    }
    let f64_at = |i: usize| f64::from_le_bytes(body[i..i + 8].try_into().expect("8 bytes"));
    let u32_at = |i: usize| u32::from_le_bytes(body[i..i + 4].try_into().expect("4 bytes")) as usize;
    let u64_at = |i: usize| u64::from_le_bytes(body[i..i + 8].try_into().expect("8 bytes")) as usize;
    let (lab0, grp0, id0) = (n * d * 8, n * d * 8 + n * 4, n * d * 8 + n * 8);
    let groups = header.pi.len();
    let samples: Vec<Sample> = (0..n)
        .map(|k| Sample {
            id: u64_at(id0 + 8 * k),
            x: (0..d).map(|j| f64_at(8 * (k * d + j))).collect(),
            label: u32_at(lab0 + 4 * k),
            group: u32_at(grp0 + 4 * k),
        })
        .collect();
    if samples.iter().any(|s| s.group >= groups) {
        return Err(Error::format("shard body", "group id outside pi"));
    }
    let shard = ClientShard::new(header.client_id, samples, groups, header.seed);
    if shard.pi != header.pi {
        return Err(Error::format("shard header", "pi disagrees with stored groups"));
    }
    Ok(shard)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blocks(groups: usize, classes: usize) -> Vec<Vec<usize>> {
        (0..groups)
            .map(|g| (0..classes).filter(|c| c * groups / classes == g).collect())
            .collect()
    }

    fn spec(per_cell: usize, sigma: f64) -> MixtureSpec {
        MixtureSpec::orthogonal_groups(4, 8, 16, 6.0, 1.0, sigma, per_cell, &blocks(4, 8), 3).unwrap()
    }

    fn ids(shards: &[ClientShard]) -> Vec<usize> {
        let mut v: Vec<usize> = shards.iter().flat_map(|s| s.samples.iter().map(|x| x.id)).collect();
        v.sort_unstable();
        v
    }

    #[test]
    fn mixture_counts_and_degenerate_noise() {
        let sp = spec(5, 1e-9);
        let pool = gen_mixture(&sp, 1).unwrap();
        assert_eq!(pool.samples.len(), sp.total());
        assert_eq!(pool.samples.len(), 4 * 2 * 5);
        for s in &pool.samples {
            let m = &sp.means[sp.cell(s.group, s.label)];
            let dev = s.x.iter().zip(m).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(dev < 1e-6);
        }
        let mut bad = sp.clone();
        bad.sigma = 0.0;
        assert!(gen_mixture(&bad, 1).is_err());
    }

    #[test]
    fn mixture_cell_means_converge() {
        let sp = MixtureSpec::orthogonal_groups(2, 2, 4, 3.0, 1.0, 0.7, 500, &[vec![0, 1], vec![0, 1]], 9).unwrap();
        let pool = gen_mixture(&sp, 2).unwrap();
        let bound = 3.0 * sp.sigma / (500f64).sqrt();
        for g in 0..2 {
            for c in 0..2 {
                let cell: Vec<&Sample> = pool.samples.iter().filter(|s| s.group == g && s.label == c).collect();
                for j in 0..4 {
                    let mean = cell.iter().map(|s| s.x[j]).sum::<f64>() / cell.len() as f64;
                    assert!((mean - sp.means[sp.cell(g, c)][j]).abs() < bound);
                }
            }
        }
    }

    #[test]
    fn separation_is_reported() {
        let sp = MixtureSpec::orthogonal_groups(4, 4, 16, 6.0, 0.0, 0.5, 10, &blocks(4, 4), 1).unwrap();
        // Orthogonal centers at radius r are r * sqrt(2) apart.
        assert!((sp.separation() - 6.0 * 2f64.sqrt() / 0.5).abs() < 1e-9);
    }

    #[test]
    fn largest_remainder_conserves() {
        assert_eq!(largest_remainder(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(largest_remainder(7, &[0.5]), vec![7]);
        assert_eq!(largest_remainder(5, &[]), Vec::<usize>::new());
        assert_eq!(largest_remainder(9, &[0.45, 0.55]).iter().sum::<usize>(), 9);
    }

    #[test]
    fn pathological_single_client_gets_everything() {
        let pool = gen_mixture(&spec(4, 0.5), 1).unwrap();
        let shards = pathological_partition(&pool, 1, 8, 1).unwrap();
        assert_eq!(shards[0].len(), pool.samples.len());
    }

    #[test]
    fn pathological_structure_and_conservation() {
        let pool = gen_mixture(&spec(30, 0.5), 1).unwrap();
        for seed in 0..5 {
            let shards = pathological_partition(&pool, 20, 2, seed).unwrap();
            assert_eq!(ids(&shards), (0..pool.samples.len()).collect::<Vec<_>>());
            for s in &shards {
                let labels = s.label_counts(8).iter().filter(|&&c| c > 0).count();
                assert_eq!(labels, 2, "client {} holds {labels} labels", s.client_id);
                let total: f64 = s.pi.iter().sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
            assert_eq!(shards, pathological_partition(&pool, 20, 2, seed).unwrap());
        }
        let err = pathological_partition(&pool, 20, 9, 0).unwrap_err().to_string();
        assert!(err.contains('9') && err.contains('8'), "{err}");
    }

    #[test]
    fn mixture_partition_concentration_extremes() {
        let sp = MixtureSpec::orthogonal_groups(4, 4, 8, 4.0, 1.0, 0.5, 250, &blocks(4, 4), 2).unwrap();
        let pool = gen_mixture(&sp, 2).unwrap();
        let flat = mixture_partition(&pool, 10, 1e6, 4).unwrap();
        for s in &flat {
            assert!(s.pi.iter().all(|p| (p - 0.25).abs() < 0.01), "{:?}", s.pi);
        }
        let mut concentrated = 0usize;
        for seed in 0..10 {
            let shards = mixture_partition(&pool, 10, 0.1, seed).unwrap();
            assert_eq!(ids(&shards).len(), pool.samples.len());
            for s in &shards {
                let counts = s.group_counts();
                for (p, c) in s.pi.iter().zip(counts) {
                    assert_eq!(*p, c as f64 / s.len() as f64);
                }
            }
            concentrated += shards.iter().filter(|s| s.pi.iter().cloned().fold(0.0, f64::max) >= 0.6).count();
        }
        assert!(concentrated as f64 >= 0.5 * 100.0, "{concentrated} of 100");
    }

    #[test]
    fn mixture_partition_rejects_tiny_pool() {
        let sp = MixtureSpec::orthogonal_groups(2, 2, 4, 4.0, 1.0, 0.5, 1, &[vec![0], vec![1]], 2).unwrap();
        let pool = gen_mixture(&sp, 2).unwrap();
        assert!(mixture_partition(&pool, 5, 1.0, 0).is_err());
        assert!(mixture_partition(&pool, 2, 0.0, 0).is_err());
    }

    #[test]
    fn domain_partition_identity_and_shift() {
        let sp = MixtureSpec::orthogonal_groups(1, 4, 6, 3.0, 1.0, 0.5, 100, &[vec![0, 1, 2, 3]], 5).unwrap();
        let pool = gen_mixture(&sp, 5).unwrap();
        let ident = vec![DomainTransform::identity(6); 4];
        let shards = domain_partition(&pool, 4, &ident, 1).unwrap();
        assert_eq!(ids(&shards), (0..400).collect::<Vec<_>>());
        for s in &shards {
            assert_eq!(s.label_counts(4), vec![25; 4]);
            for x in &s.samples {
                assert_eq!(x.x, pool.samples[x.id].x);
            }
        }
        assert!(domain_partition(&pool, 3, &ident, 1).is_err());

        let shift = 2.0;
        let transforms = vec![
            DomainTransform::identity(6),
            DomainTransform::shift(vec![shift, 0.0, 0.0, 0.0, 0.0, 0.0]),
        ];
        let shards = domain_partition(&pool, 2, &transforms, 2).unwrap();
        let mean0 = |s: &ClientShard| s.samples.iter().map(|x| x.x[0]).sum::<f64>() / s.len() as f64;
        let var0 = |s: &ClientShard, m: f64| s.samples.iter().map(|x| (x.x[0] - m).powi(2)).sum::<f64>() / (s.len() - 1) as f64;
        let (m0, m1) = (mean0(&shards[0]), mean0(&shards[1]));
        let se = (var0(&shards[0], m0) / shards[0].len() as f64 + var0(&shards[1], m1) / shards[1].len() as f64).sqrt();
        assert!((m1 - m0).abs() >= shift - 3.0 * se);
        assert!(shards.iter().all(|s| s.label_counts(4).iter().all(|&c| c > 0)));
    }

    #[test]
    fn heterogeneity_knobs_are_monotone() {
        let pool = gen_mixture(&spec(40, 0.5), 8).unwrap();
        let tv_s = |s: usize| -> f64 {
            (0..5).map(|seed| label_tv_distance(&pathological_partition(&pool, 20, s, seed).unwrap(), 8)).sum::<f64>() / 5.0
        };
        let by_s: Vec<f64> = [8, 6, 4, 2, 1].iter().map(|&s| tv_s(s)).collect();
        assert!(by_s.windows(2).all(|w| w[0] <= w[1] + 1e-12), "{by_s:?}");

        let tv_a = |a: f64| -> f64 {
            (0..5).map(|seed| label_tv_distance(&mixture_partition(&pool, 10, a, seed).unwrap(), 8)).sum::<f64>() / 5.0
        };
        let by_a: Vec<f64> = [100.0, 10.0, 1.0, 0.1].iter().map(|&a| tv_a(a)).collect();
        assert!(by_a.windows(2).all(|w| w[0] <= w[1] + 1e-12), "{by_a:?}");
    }

    #[test]
    fn shard_dump_round_trip() {
        let pool = gen_mixture(&spec(6, 0.5), 3).unwrap();
        let shards = pathological_partition(&pool, 4, 2, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for s in &shards {
            let p = dir.path().join(format!("client{}.shard", s.client_id));
            write_shard(&p, s).unwrap();
            assert_eq!(&read_shard(&p).unwrap(), s);
        }
        let p = dir.path().join("broken.shard");
        std::fs::write(&p, b"{\"format\":\"nope\"}\n").unwrap();
        assert!(read_shard(&p).is_err());
    }

    #[test]
    fn split_keeps_all_samples() {
        let pool = gen_mixture(&spec(10, 0.5), 3).unwrap();
        let shard = ClientShard::new(0, pool.samples.clone(), 4, 0);
        let (train, test) = shard.split(0.25, 1);
        assert_eq!(train.len() + test.len(), shard.len());
        assert_eq!(test.len(), 8 * 3);
    }
}
