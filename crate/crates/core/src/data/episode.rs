use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::render::{render_instance, Instance, NUM_CLASSES};
use crate::data::split::StageSplit;
use crate::error::{Error, Result};
use crate::seed::mix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pool {
    Train,
    Test,
}

impl Pool {
    pub fn as_str(self) -> &'static str {
        match self {
            Pool::Train => "train",
            Pool::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct ClassPools {
    train: Vec<u64>,
    test: Vec<u64>,
}

/// Per-class instance seeds, split into disjoint train and test pools.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    image_size: usize,
    classes: Vec<ClassPools>,
}

impl DatasetIndex {
    pub fn build(master_seed: u64, image_size: usize, train_pool: usize, test_pool: usize) -> Self {
        let classes = (0..NUM_CLASSES)
            .map(|class_id| {
                let mut seen = HashSet::new();
                let mut seeds = Vec::with_capacity(train_pool + test_pool);
                let mut counter = 0u64;
                while seeds.len() < train_pool + test_pool {
                    let s = mix(&[master_seed, 0xDA7A, class_id as u64, counter]);
                    counter += 1;
                    if seen.insert(s) {
                        seeds.push(s);
                    }
                }
                let test = seeds.split_off(train_pool);
                ClassPools { train: seeds, test }
            })
            .collect();
        DatasetIndex { image_size, classes }
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn pool(&self, class_id: usize, pool: Pool) -> Result<&[u64]> {
        let c = self.classes.get(class_id).ok_or_else(|| Error::Range {
            what: "class id",
            value: class_id,
            allowed: format!("0..{NUM_CLASSES}"),
        })?;
        Ok(match pool {
            Pool::Train => &c.train,
            Pool::Test => &c.test,
        })
    }

    pub fn render(&self, class_id: usize, seed: u64) -> Result<Instance> {
        render_instance(class_id, seed, self.image_size)
    }

    /// Line-oriented listing: `class_id instance_seed split`.
    pub fn manifest(&self) -> String {
        let mut out = format!("# class_id instance_seed split (image_size = {})\n", self.image_size);
        for (class_id, pools) in self.classes.iter().enumerate() {
            for (pool, seeds) in [(Pool::Train, &pools.train), (Pool::Test, &pools.test)] {
                for s in seeds {
                    writeln!(out, "{class_id} {s} {}", pool.as_str()).unwrap();
                }
            }
        }
        out
    }
}

/// One sampling unit: k support instances and a distinct query, all of one
/// class, drawn from a single pool.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Episode {
    pub id: usize,
    pub class_id: usize,
    pub pool: Pool,
    pub supports: Vec<u64>,
    pub query: u64,
}

impl Episode {
    pub fn k(&self) -> usize {
        self.supports.len()
    }

    pub fn render(&self, index: &DatasetIndex) -> Result<RenderedEpisode> {
        Ok(RenderedEpisode {
            supports: self.supports.iter().map(|&s| index.render(self.class_id, s)).collect::<Result<_>>()?,
            query: index.render(self.class_id, self.query)?,
        })
    }

    /// The same episode restricted to its first `k` supports.
    pub fn with_shots(&self, k: usize) -> Result<Episode> {
        if k == 0 || k > self.supports.len() {
            return Err(Error::Validation(format!("cannot take {k} shots from {}", self.supports.len())));
        }
        Ok(Episode { supports: self.supports[..k].to_vec(), ..self.clone() })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedEpisode {
    pub supports: Vec<Instance>,
    pub query: Instance,
}

/// Draw one episode. The class is uniform over `classes`; supports and query
/// are distinct instances of its `pool`.
pub fn sample_episode(index: &DatasetIndex, classes: &[usize], k: usize, pool: Pool, rng_seed: u64) -> Result<Episode> {
    if k == 0 {
        return Err(Error::Validation("episodes need at least one support".into()));
    }
    if classes.is_empty() {
        return Err(Error::Validation("no classes to sample from".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let class_id = classes[rng.random_range(0..classes.len())];
    let seeds = index.pool(class_id, pool)?;
    if seeds.len() < k + 1 {
        return Err(Error::Capacity { class_id, available: seeds.len(), needed: k + 1 });
    }
    let picks = sample(&mut rng, seeds.len(), k + 1);
    let mut picks = picks.iter().map(|i| seeds[i]);
    let query = picks.next().expect("k + 1 picks");
    Ok(Episode { id: 0, class_id, pool, supports: picks.collect(), query })
}

/// The fixed evaluation set: `n_pairs` test-pool episodes, episode `i` drawn
/// with seed `mix(seed, i)`.
pub fn build_eval_set(index: &DatasetIndex, test_classes: &[usize], n_pairs: usize, k: usize, seed: u64) -> Result<Vec<Episode>> {
    (0..n_pairs)
        .map(|i| {
            let mut ep = sample_episode(index, test_classes, k, Pool::Test, mix(&[seed, 0xE7A1, i as u64]))?;
            ep.id = i;
            Ok(ep)
        })
        .collect()
}

/// One line per episode: `id class_id pool query support,support,...`.
pub fn episodes_to_text(episodes: &[Episode]) -> String {
    let mut out = String::from("# episode class_id pool query supports\n");
    for e in episodes {
        let sup: Vec<String> = e.supports.iter().map(ToString::to_string).collect();
        writeln!(out, "{} {} {} {} {}", e.id, e.class_id, e.pool.as_str(), e.query, sup.join(",")).unwrap();
    }
    out
}

/// Which part of a run consumed an instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Classifier,
    Episodic,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Classifier => "classifier",
            Stage::Episodic => "episodic",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AuditEntry {
    pub stage: Stage,
    pub step: usize,
    pub class_id: usize,
    pub seed: u64,
    pub pool: Pool,
}

/// Record of every instance a training run touched.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AuditLog {
    pub entries: Vec<AuditEntry>,
}

impl AuditLog {
    pub fn record(&mut self, stage: Stage, step: usize, class_id: usize, seed: u64, pool: Pool) {
        self.entries.push(AuditEntry { stage, step, class_id, seed, pool });
    }

    pub fn record_episode(&mut self, stage: Stage, step: usize, ep: &Episode) {
        for &s in ep.supports.iter().chain(std::iter::once(&ep.query)) {
            self.record(stage, step, ep.class_id, s, ep.pool);
        }
    }

    /// Entries that touch a test class or the test pool.
    pub fn leaks(&self, split: &StageSplit) -> Vec<&AuditEntry> {
        self.entries
            .iter()
            .filter(|e| split.test_classes.contains(&e.class_id) || e.pool == Pool::Test)
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# stage step class_id instance_seed pool\n");
        for e in &self.entries {
            writeln!(out, "{} {} {} {} {}", e.stage.as_str(), e.step, e.class_id, e.seed, e.pool.as_str()).unwrap();
        }
        out
    }
}
