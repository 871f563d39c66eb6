//! Client data partitions: the label-sorted shard procedure that produces
//! statistically heterogeneous clients, and a uniformly shuffled IID
//! control. Both are pure functions of (labels/sizes, n_clients, seed).

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::data::LabelSet;
use crate::error::{Error, Result};

/// How a partition was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionKind {
    NonIid,
    Iid,
}

impl std::fmt::Display for PartitionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PartitionKind::NonIid => write!(f, "non-iid"),
            PartitionKind::Iid => write!(f, "iid"),
        }
    }
}

/// Assignment of sample indices to clients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FederatedPartition {
    kind: PartitionKind,
    seed: u64,
    n_samples: usize,
    clients: Vec<Vec<u32>>,
    /// 2 for the shard procedure, 0 for IID (not applicable).
    shards_per_client: usize,
    /// Samples per shard; 0 for IID.
    shard_size: usize,
    /// Leftover samples not assigned to any client.
    dropped: usize,
}

impl FederatedPartition {
    pub fn kind(&self) -> PartitionKind {
        self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn client(&self, i: usize) -> &[u32] {
        &self.clients[i]
    }

    pub fn clients(&self) -> &[Vec<u32>] {
        &self.clients
    }

    pub fn shards_per_client(&self) -> usize {
        self.shards_per_client
    }

    pub fn shard_size(&self) -> usize {
        self.shard_size
    }

    pub fn dropped(&self) -> usize {
        self.dropped
    }

    /// Verifies disjointness and coverage of {0..n_samples} modulo the
    /// declared dropped count.
    pub fn check_invariants(&self) -> Result<()> {
        let mut seen = vec![false; self.n_samples];
        let mut assigned = 0usize;
        for (c, idxs) in self.clients.iter().enumerate() {
            for &i in idxs {
                let i = i as usize;
                if i >= self.n_samples {
                    return Err(Error::Shape(format!(
                        "client {c} references sample {i} outside 0..{}",
                        self.n_samples
                    )));
                }
                if seen[i] {
                    return Err(Error::Shape(format!("sample {i} assigned twice")));
                }
                seen[i] = true;
                assigned += 1;
            }
        }
        if assigned + self.dropped != self.n_samples {
            return Err(Error::Shape(format!(
                "{assigned} assigned + {} dropped != {} samples",
                self.dropped, self.n_samples
            )));
        }
        Ok(())
    }
}

/// The non-IID shard procedure: stably sort indices by label, cut into
/// 2*n_clients contiguous shards of floor(n/(2N)) samples, shuffle the
/// shard ids with the seeded stream, hand 2 shards to each client.
/// Leftover samples (when 2N does not divide n) are dropped and counted.
pub fn shard_partition(
    labels: &LabelSet,
    n_clients: usize,
    seed: u64,
) -> Result<FederatedPartition> {
    let n = labels.count();
    if n_clients < 1 {
        return Err(Error::Config("n_clients must be at least 1".into()));
    }
    if n < 2 * n_clients {
        return Err(Error::Config(format!(
            "{n} samples cannot fill 2 shards for each of {n_clients} clients"
        )));
    }
    let n_shards = 2 * n_clients;
    let shard_size = n / n_shards;
    let dropped = n - n_shards * shard_size;

    // stable sort keeps original index order inside each label
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.sort_by_key(|&i| labels.label(i as usize));

    let mut shard_ids: Vec<usize> = (0..n_shards).collect();
    let mut rng = crate::rng::stream(seed, &[crate::rng::domain::PARTITION]);
    fisher_yates(&mut shard_ids, &mut rng);

    let clients = (0..n_clients)
        .map(|c| {
            let mut idxs = Vec::with_capacity(2 * shard_size);
            for &shard in &shard_ids[2 * c..2 * c + 2] {
                let start = shard * shard_size;
                idxs.extend_from_slice(&order[start..start + shard_size]);
            }
            idxs
        })
        .collect();

    Ok(FederatedPartition {
        kind: PartitionKind::NonIid,
        seed,
        n_samples: n,
        clients,
        shards_per_client: 2,
        shard_size,
        dropped,
    })
}

/// IID control: uniformly shuffle all indices and split into n_clients
/// near-equal contiguous blocks (sizes differ by at most 1).
pub fn iid_partition(n_samples: usize, n_clients: usize, seed: u64) -> Result<FederatedPartition> {
    if n_clients < 1 {
        return Err(Error::Config("n_clients must be at least 1".into()));
    }
    if n_samples < n_clients {
        return Err(Error::Config(format!(
            "{n_samples} samples cannot cover {n_clients} clients"
        )));
    }
    let mut order: Vec<u32> = (0..n_samples as u32).collect();
    let mut rng = crate::rng::stream(seed, &[crate::rng::domain::PARTITION]);
    fisher_yates(&mut order, &mut rng);

    let base = n_samples / n_clients;
    let extra = n_samples % n_clients;
    let mut clients = Vec::with_capacity(n_clients);
    let mut start = 0;
    for c in 0..n_clients {
        let size = base + usize::from(c < extra);
        clients.push(order[start..start + size].to_vec());
        start += size;
    }

    Ok(FederatedPartition {
        kind: PartitionKind::Iid,
        seed,
        n_samples,
        clients,
        shards_per_client: 0,
        shard_size: 0,
        dropped: 0,
    })
}

fn fisher_yates<T>(items: &mut [T], rng: &mut impl Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

const MANIFEST_HEADER: &str = "fedsim-partition v1";

impl FederatedPartition {
    /// Writes the manifest: header fields then one `client <id>:` line of
    /// space-separated sample indices per client.
    pub fn write_manifest(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "{MANIFEST_HEADER}")?;
        writeln!(w, "kind = {}", self.kind)?;
        writeln!(w, "seed = {}", self.seed)?;
        writeln!(w, "n_samples = {}", self.n_samples)?;
        writeln!(w, "n_clients = {}", self.clients.len())?;
        writeln!(w, "shards_per_client = {}", self.shards_per_client)?;
        writeln!(w, "shard_size = {}", self.shard_size)?;
        writeln!(w, "dropped = {}", self.dropped)?;
        for (c, idxs) in self.clients.iter().enumerate() {
            write!(w, "client {c}:")?;
            for &i in idxs {
                write!(w, " {i}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn write_manifest_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_manifest(&mut w).map_err(|e| Error::io(path, e))
    }

    pub fn read_manifest(r: impl Read) -> Result<Self> {
        let reader = BufReader::new(r);
        let mut lines = reader.lines();
        let header = lines
            .next()
            .transpose()
            .map_err(|e| Error::Format(format!("manifest read failed: {e}")))?
            .unwrap_or_default();
        if header.trim() != MANIFEST_HEADER {
            return Err(Error::Format(format!(
                "not a partition manifest (header {header:?})"
            )));
        }

        let mut kind = None;
        let mut seed = None;
        let mut n_samples = None;
        let mut n_clients = None;
        let mut shards_per_client = None;
        let mut shard_size = None;
        let mut dropped = None;
        let mut clients: Vec<Vec<u32>> = Vec::new();

        for line in lines {
            let line = line.map_err(|e| Error::Format(format!("manifest read failed: {e}")))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("client ") {
                let (id, idxs) = rest
                    .split_once(':')
                    .ok_or_else(|| Error::Format(format!("bad client line: {line}")))?;
                let id: usize = id
                    .trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("bad client id: {id}")))?;
                if id != clients.len() {
                    return Err(Error::Format(format!(
                        "client lines out of order: got {id}, expected {}",
                        clients.len()
                    )));
                }
                let parsed: std::result::Result<Vec<u32>, _> =
                    idxs.split_whitespace().map(str::parse).collect();
                clients.push(
                    parsed.map_err(|_| Error::Format(format!("bad index list for client {id}")))?,
                );
            } else if let Some((key, value)) = line.split_once('=') {
                let (key, value) = (key.trim(), value.trim());
                match key {
                    "kind" => {
                        kind = Some(match value {
                            "non-iid" => PartitionKind::NonIid,
                            "iid" => PartitionKind::Iid,
                            other => {
                                return Err(Error::Format(format!("unknown kind {other:?}")))
                            }
                        })
                    }
                    "seed" => seed = Some(parse_field(key, value)?),
                    "n_samples" => n_samples = Some(parse_field(key, value)?),
                    "n_clients" => n_clients = Some(parse_field(key, value)?),
                    "shards_per_client" => shards_per_client = Some(parse_field(key, value)?),
                    "shard_size" => shard_size = Some(parse_field(key, value)?),
                    "dropped" => dropped = Some(parse_field(key, value)?),
                    other => return Err(Error::Format(format!("unknown manifest key {other:?}"))),
                }
            } else {
                return Err(Error::Format(format!("unparseable manifest line: {line}")));
            }
        }

        let partition = FederatedPartition {
            kind: kind.ok_or_else(|| missing("kind"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            n_samples: n_samples.ok_or_else(|| missing("n_samples"))? as usize,
            clients,
            shards_per_client: shards_per_client.ok_or_else(|| missing("shards_per_client"))?
                as usize,
            shard_size: shard_size.ok_or_else(|| missing("shard_size"))? as usize,
            dropped: dropped.ok_or_else(|| missing("dropped"))? as usize,
        };
        let declared = n_clients.ok_or_else(|| missing("n_clients"))? as usize;
        if declared != partition.clients.len() {
            return Err(Error::Format(format!(
                "manifest declares {declared} clients but lists {}",
                partition.clients.len()
            )));
        }
        Ok(partition)
    }

    pub fn read_manifest_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_manifest(file)
    }
}

fn parse_field(key: &str, value: &str) -> Result<u64> {
    value
        .parse()
        .map_err(|_| Error::Format(format!("bad value for {key}: {value:?}")))
}

fn missing(key: &str) -> Error {
    Error::Format(format!("manifest missing {key}"))
}

/// Distinct labels held by one client.
pub fn distinct_labels(labels: &LabelSet, indices: &[u32]) -> usize {
    let mut seen = [false; 10];
    for &i in indices {
        seen[labels.label(i as usize) as usize] = true;
    }
    seen.iter().filter(|&&s| s).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels_balanced(n: usize) -> LabelSet {
        // round-robin labels so every class is equally common
        LabelSet::from_labels((0..n).map(|i| (i % 10) as u8).collect()).unwrap()
    }

    #[test]
    fn mnist_shaped_shards() {
        let labels = labels_balanced(60_000);
        let p = shard_partition(&labels, 100, 7).unwrap();
        assert_eq!(p.shard_size(), 300);
        assert_eq!(p.dropped(), 0);
        assert_eq!(p.n_clients(), 100);
        for c in 0..100 {
            assert_eq!(p.client(c).len(), 600);
            assert!(distinct_labels(&labels, p.client(c)) <= 4);
        }
        p.check_invariants().unwrap();
    }

    #[test]
    fn single_client_holds_everything() {
        let labels = labels_balanced(100);
        let p = shard_partition(&labels, 1, 3).unwrap();
        assert_eq!(p.n_clients(), 1);
        assert_eq!(p.client(0).len(), 100);
        p.check_invariants().unwrap();
    }

    #[test]
    fn too_few_samples_is_a_config_error() {
        let labels = labels_balanced(5);
        assert!(matches!(
            shard_partition(&labels, 3, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn each_shard_spans_at_most_two_labels_when_classes_are_large() {
        // 1000 samples, 10 classes of 100 each, 10 clients -> shard size 50
        let labels = labels_balanced(1000);
        let p = shard_partition(&labels, 10, 11).unwrap();
        for c in 0..10 {
            // client = 2 shards, each spanning <= 2 labels
            let idxs = p.client(c);
            let (a, b) = idxs.split_at(p.shard_size());
            assert!(distinct_labels(&labels, a) <= 2);
            assert!(distinct_labels(&labels, b) <= 2);
            assert!(distinct_labels(&labels, idxs) <= 4);
        }
    }

    #[test]
    fn iid_split_sizes_differ_by_at_most_one() {
        let p = iid_partition(7, 3, 5).unwrap();
        let mut sizes: Vec<usize> = p.clients().iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 2, 3]);
        p.check_invariants().unwrap();

        let p2 = iid_partition(10, 2, 5).unwrap();
        assert_eq!(p2.client(0).len(), 5);
        assert_eq!(p2.client(1).len(), 5);
        p2.check_invariants().unwrap();
    }

    #[test]
    fn partitions_are_deterministic_in_the_seed() {
        let labels = labels_balanced(400);
        assert_eq!(
            shard_partition(&labels, 10, 9).unwrap(),
            shard_partition(&labels, 10, 9).unwrap()
        );
        assert_ne!(
            shard_partition(&labels, 10, 9).unwrap(),
            shard_partition(&labels, 10, 10).unwrap()
        );
        assert_eq!(
            iid_partition(400, 7, 1).unwrap(),
            iid_partition(400, 7, 1).unwrap()
        );
    }

    #[test]
    fn manifest_roundtrip_preserves_index_lists() {
        let labels = labels_balanced(437); // not divisible by 2N, drops some
        let p = shard_partition(&labels, 10, 21).unwrap();
        assert_eq!(p.dropped(), 437 - 420);
        let mut buf = Vec::new();
        p.write_manifest(&mut buf).unwrap();
        let q = FederatedPartition::read_manifest(&buf[..]).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn manifest_rejects_garbage() {
        assert!(matches!(
            FederatedPartition::read_manifest(&b"nope"[..]),
            Err(Error::Format(_))
        ));
        let bad = format!("{MANIFEST_HEADER}\nkind = non-iid\nwhat = 3\n");
        assert!(matches!(
            FederatedPartition::read_manifest(bad.as_bytes()),
            Err(Error::Format(_))
        ));
    }

    proptest! {
        #[test]
        fn shard_partition_covers_and_never_overlaps(
            n in 4usize..400,
            n_clients in 1usize..12,
            seed in any::<u64>(),
        ) {
            prop_assume!(n >= 2 * n_clients);
            let labels = labels_balanced(n);
            let p = shard_partition(&labels, n_clients, seed).unwrap();
            p.check_invariants().unwrap();
            prop_assert!(p.dropped() < 2 * n_clients);
            let per_client = p.shards_per_client() * p.shard_size();
            for c in p.clients() {
                prop_assert_eq!(c.len(), per_client);
            }
        }

        #[test]
        fn iid_partition_covers_with_near_equal_sizes(
            n in 1usize..400,
            n_clients in 1usize..12,
            seed in any::<u64>(),
        ) {
            prop_assume!(n >= n_clients);
            let p = iid_partition(n, n_clients, seed).unwrap();
            p.check_invariants().unwrap();
            let sizes: Vec<usize> = p.clients().iter().map(Vec::len).collect();
            let min = sizes.iter().min().unwrap();
            let max = sizes.iter().max().unwrap();
            prop_assert!(max - min <= 1);
        }

        #[test]
        fn manifest_roundtrip_property(
            n in 20usize..200,
            n_clients in 1usize..8,
            seed in any::<u64>(),
        ) {
            prop_assume!(n >= 2 * n_clients);
            let labels = labels_balanced(n);
            let p = shard_partition(&labels, n_clients, seed).unwrap();
            let mut buf = Vec::new();
            p.write_manifest(&mut buf).unwrap();
            let q = FederatedPartition::read_manifest(&buf[..]).unwrap();
            prop_assert_eq!(p, q);
        }
    }
}
