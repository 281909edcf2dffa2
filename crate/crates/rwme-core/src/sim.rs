//! Monte Carlo engine: lazy annealed environments, shared quenched
//! environments, and replica orchestration.
//!
//! The annealed sampler never materializes an environment. It stores one
//! (last query time, state) record per visited site and bridges the
//! unobserved gap with a multi-step transition row, which is exactly the
//! collapse that makes the walk's path law computable: first visits draw
//! from pi, revisits draw from the p(gap) row of the remembered state.
//!
//! The quenched sampler fixes one environment realization shared by all
//! walkers. A site's full state trajectory is generated on first touch from
//! a substream keyed by (environment seed, site coordinates) alone, so the
//! realization is identical no matter which walker arrives first or in what
//! order sites are touched. Its memory cost is horizon cells per touched
//! site; for many walkers at long horizons the lockstep sampler instead
//! advances all walkers through global time together and keeps one
//! last-touch record per site, realizing the environment only where and
//! when some walker looks at it.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustc_hash::FxHashMap;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::ChainAnalysis;
use crate::pathlaw::{SymbolAlphabet, SymbolId};
use crate::rng;

/// Largest dense 1-d position table (entries) before falling back to a map.
const DENSE_SPAN_LIMIT: usize = 1 << 22;

/// Cap on stored quenched site-time cells (states are two bytes each).
pub const QUENCHED_CELL_GUARD: usize = 1 << 26;

/// Cap on distinct sites a lockstep quenched run may touch.
pub const LOCKSTEP_SITE_GUARD: usize = 1 << 24;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("query at time {time} does not advance the site's clock (last query at {last})")]
    TimeOrderViolation { time: u64, last: u64 },
    #[error("query at time {time} is beyond the quenched horizon {horizon}")]
    HorizonExceeded { time: u64, horizon: usize },
    #[error("quenched environment would exceed {guard} stored site-time cells")]
    EnvironmentTooLarge { guard: usize },
}

/// One simulated walk.
#[derive(Debug, Clone, Serialize)]
pub struct WalkSample {
    pub replica: u64,
    /// Position after the final step.
    pub final_position: Vec<i64>,
    /// Positions after steps 1..=n, when recording was requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<Vec<Vec<i64>>>,
    /// The (state, jump) symbol at each step, when recording was requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub symbols: Option<Vec<SymbolId>>,
}

/// What each walk records beyond its final position.
#[derive(Debug, Clone, Copy, Default)]
pub struct SampleOptions {
    pub record_path: bool,
    pub record_symbols: bool,
}

/// Samples plus the identity of the shared environment they ran in.
#[derive(Debug)]
pub struct QuenchedRun {
    pub samples: Vec<WalkSample>,
    /// Pure function of (model, environment seed, horizon); walker seeds and
    /// the set of touched sites cannot influence it.
    pub environment_digest: u64,
}

/// Dense table for 1-d positions within a known span; positions are offset
/// by `n * max_jump` so the walk can never index out of bounds.
struct Dense1d<T> {
    base: i64,
    cells: Vec<T>,
}

impl<T: Clone> Dense1d<T> {
    fn try_new(chain: &ChainAnalysis, n: usize, fill: T) -> Option<Self> {
        let model = chain.model();
        if model.dimension() != 1 {
            return None;
        }
        let reach = (n as i64).checked_mul(model.max_jump_norm())?;
        let span = reach.checked_mul(2)?.checked_add(1)?;
        if span > DENSE_SPAN_LIMIT as i64 {
            return None;
        }
        Some(Dense1d {
            base: -reach,
            cells: vec![fill; span as usize],
        })
    }

    fn index(&self, position: &[i64]) -> usize {
        (position[0] - self.base) as usize
    }
}

/// Last-touch record per site, shared by the annealed and lockstep
/// samplers: the epoch stamp makes resetting between annealed replicas
/// O(1) instead of a table clear.
enum LazyStore {
    Dense {
        table: Dense1d<(u32, u32, u16)>, // (epoch, last time + 1, state)
        epoch: u32,
    },
    Sparse {
        map: FxHashMap<Vec<i64>, (u64, u16)>, // last time + 1, state
    },
}

impl LazyStore {
    fn new(chain: &ChainAnalysis, n: usize) -> Self {
        if n < u32::MAX as usize {
            if let Some(table) = Dense1d::try_new(chain, n, (0u32, 0u32, 0u16)) {
                return LazyStore::Dense { table, epoch: 0 };
            }
        }
        LazyStore::Sparse {
            map: FxHashMap::default(),
        }
    }

    /// Forget every site record; the next walk sees a fresh environment.
    fn reset(&mut self) {
        match self {
            LazyStore::Dense { table, epoch } => {
                if *epoch == u32::MAX {
                    table.cells.fill((0, 0, 0));
                    *epoch = 0;
                }
                *epoch += 1;
            }
            LazyStore::Sparse { map } => map.clear(),
        }
    }

    /// Last-query record for the site, if it was visited this epoch.
    fn get(&self, position: &[i64]) -> Option<(u64, u16)> {
        match self {
            LazyStore::Dense { table, epoch } => {
                let (e, stamp, state) = table.cells[table.index(position)];
                (e == *epoch && stamp > 0).then(|| (stamp as u64 - 1, state))
            }
            LazyStore::Sparse { map } => {
                map.get(position).map(|&(stamp, state)| (stamp - 1, state))
            }
        }
    }

    fn put(&mut self, position: &[i64], time: u64, state: u16) {
        match self {
            LazyStore::Dense { table, epoch } => {
                let idx = table.index(position);
                table.cells[idx] = (*epoch, time as u32 + 1, state);
            }
            LazyStore::Sparse { map } => {
                if let Some(cell) = map.get_mut(position) {
                    *cell = (time + 1, state);
                } else {
                    map.insert(position.to_vec(), (time + 1, state));
                }
            }
        }
    }
}

/// A site's materialized chain path, generated in one shot on first touch.
struct QuenchedStore {
    env_seed: u64,
    horizon: usize,
    dense: Option<Dense1d<Option<Vec<u16>>>>,
    sparse: FxHashMap<Vec<i64>, Vec<u16>>,
    cells: usize,
}

impl QuenchedStore {
    fn new(chain: &ChainAnalysis, env_seed: u64, horizon: usize) -> Self {
        QuenchedStore {
            env_seed,
            horizon,
            dense: Dense1d::try_new(chain, horizon, None),
            sparse: FxHashMap::default(),
            cells: 0,
        }
    }

    /// The site's trajectory over times 0..horizon, materializing it on
    /// first touch from the (env_seed, site) substream.
    fn trajectory(&mut self, chain: &ChainAnalysis, position: &[i64]) -> Result<&[u16], SimError> {
        if let Some(table) = &mut self.dense {
            let idx = table.index(position);
            if table.cells[idx].is_none() {
                self.cells += self.horizon;
                if self.cells > QUENCHED_CELL_GUARD {
                    return Err(SimError::EnvironmentTooLarge {
                        guard: QUENCHED_CELL_GUARD,
                    });
                }
                let t = generate_trajectory(chain, self.env_seed, position, self.horizon);
                table.cells[idx] = Some(t);
            }
            return Ok(table.cells[idx].as_ref().expect("just filled"));
        }
        if !self.sparse.contains_key(position) {
            self.cells += self.horizon;
            if self.cells > QUENCHED_CELL_GUARD {
                return Err(SimError::EnvironmentTooLarge {
                    guard: QUENCHED_CELL_GUARD,
                });
            }
            let t = generate_trajectory(chain, self.env_seed, position, self.horizon);
            self.sparse.insert(position.to_vec(), t);
        }
        Ok(&self.sparse[position])
    }
}

/// Stationary-start chain path of length `horizon` for one site.
fn generate_trajectory(
    chain: &ChainAnalysis,
    env_seed: u64,
    position: &[i64],
    horizon: usize,
) -> Vec<u16> {
    use rand::Rng;
    let words = rng::site_words(position);
    let mut stream = rng::derive_rng(env_seed, rng::purpose::SITE, &words);
    let mut states = Vec::with_capacity(horizon);
    let mut state = chain.sample_stationary(stream.gen::<f64>());
    states.push(state as u16);
    for _ in 1..horizon {
        state = chain.sample_state(state, 1, stream.gen::<f64>());
        states.push(state as u16);
    }
    states
}

enum Mode {
    Annealed(LazyStore),
    Quenched(QuenchedStore),
}

/// The environment as seen by walkers: either conjured lazily per replica
/// (annealed) or one shared realization (quenched).
pub struct EnvironmentCache {
    chain: Arc<ChainAnalysis>,
    mode: Mode,
}

impl EnvironmentCache {
    pub fn annealed(chain: Arc<ChainAnalysis>, n: usize) -> Self {
        let store = LazyStore::new(&chain, n);
        EnvironmentCache {
            chain,
            mode: Mode::Annealed(store),
        }
    }

    pub fn quenched(chain: Arc<ChainAnalysis>, env_seed: u64, horizon: usize) -> Self {
        let store = QuenchedStore::new(&chain, env_seed, horizon);
        EnvironmentCache {
            chain,
            mode: Mode::Quenched(store),
        }
    }

    /// Forget all annealed site records. No-op for quenched environments,
    /// whose realization is immutable by design.
    pub fn reset(&mut self) {
        if let Mode::Annealed(store) = &mut self.mode {
            store.reset();
        }
    }

    /// Observe the site's state at `time` and draw a jump from it.
    ///
    /// Annealed: unvisited sites draw from pi, revisited sites draw from
    /// the p(gap) row of the remembered state, and the record is updated.
    /// Quenched: the state is read from the site's trajectory; `stream`
    /// only feeds the jump draw, keeping walker and environment randomness
    /// independent.
    pub fn step(
        &mut self,
        position: &[i64],
        time: u64,
        stream: &mut ChaCha8Rng,
    ) -> Result<(u16, usize), SimError> {
        use rand::Rng;
        let state = match &mut self.mode {
            Mode::Annealed(store) => {
                let state = match store.get(position) {
                    None => self.chain.sample_stationary(stream.gen::<f64>()) as u16,
                    Some((last, remembered)) => {
                        if time <= last {
                            return Err(SimError::TimeOrderViolation { time, last });
                        }
                        let gap = (time - last) as usize;
                        self.chain
                            .sample_state(remembered as usize, gap, stream.gen::<f64>())
                            as u16
                    }
                };
                store.put(position, time, state);
                state
            }
            Mode::Quenched(store) => {
                if time >= store.horizon as u64 {
                    return Err(SimError::HorizonExceeded {
                        time,
                        horizon: store.horizon,
                    });
                }
                store.trajectory(&self.chain, position)?[time as usize]
            }
        };
        let jump = self.chain.sample_jump(state as usize, stream.gen::<f64>());
        Ok((state, jump))
    }

    /// 64-bit identity of a quenched realization: a hash of the model
    /// digest, seed, horizon, and the trajectories of a fixed probe set of
    /// sites (the origin and its axis neighbors). Walker activity cannot
    /// perturb it because probe trajectories come from the same site-keyed
    /// substreams that first touch would use.
    pub fn environment_digest(&mut self) -> Option<u64> {
        let Mode::Quenched(store) = &mut self.mode else {
            return None;
        };
        let d = self.chain.model().dimension();
        let mut hasher = Sha256::new();
        hasher.update(self.chain.model().digest().as_bytes());
        hasher.update(store.env_seed.to_le_bytes());
        hasher.update((store.horizon as u64).to_le_bytes());
        let mut probes = vec![vec![0i64; d]];
        for axis in 0..d {
            for sign in [1i64, -1] {
                let mut site = vec![0i64; d];
                site[axis] = sign;
                probes.push(site);
            }
        }
        for site in probes {
            for c in &site {
                hasher.update(c.to_le_bytes());
            }
            let t = generate_trajectory(&self.chain, store.env_seed, &site, store.horizon);
            for s in t {
                hasher.update(s.to_le_bytes());
            }
        }
        let bytes = hasher.finalize();
        Some(u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")))
    }
}

/// One walk from the origin, querying `env` at times 0..n.
fn walk_once(
    env: &mut EnvironmentCache,
    alphabet: Option<&SymbolAlphabet>,
    n: usize,
    replica: u64,
    stream: &mut ChaCha8Rng,
    options: SampleOptions,
) -> Result<WalkSample, SimError> {
    let model = env.chain.model().clone();
    let d = model.dimension();
    let num_jumps = model.num_jumps();
    let mut position = vec![0i64; d];
    let mut path = options.record_path.then(|| Vec::with_capacity(n));
    let mut symbols = options.record_symbols.then(|| Vec::with_capacity(n));
    for time in 0..n {
        let (state, jump) = env.step(&position, time as u64, stream)?;
        for (x, v) in position.iter_mut().zip(&model.jumps()[jump]) {
            *x += v;
        }
        if let Some(path) = path.as_mut() {
            path.push(position.clone());
        }
        if let Some(symbols) = symbols.as_mut() {
            let id = alphabet
                .expect("alphabet present when recording symbols")
                .id_of(state as usize, jump, num_jumps)
                .expect("sampled symbols have positive probability");
            symbols.push(id);
        }
    }
    Ok(WalkSample {
        replica,
        final_position: position,
        path,
        symbols,
    })
}

/// Independent replicas, each in a fresh lazy environment.
///
/// Replica `i` consumes only the substream derived from `(seed, i)`, so the
/// output is a pure function of the arguments: parallel scheduling cannot
/// reorder or perturb it.
pub fn run_annealed(
    chain: &Arc<ChainAnalysis>,
    n: usize,
    replicas: u64,
    seed: u64,
    options: SampleOptions,
) -> Result<Vec<WalkSample>, SimError> {
    assert!(n >= 1, "run_annealed requires n >= 1");
    let alphabet = options
        .record_symbols
        .then(|| SymbolAlphabet::new(chain));
    (0..replicas)
        .into_par_iter()
        .map_init(
            || EnvironmentCache::annealed(chain.clone(), n),
            |env, replica| {
                env.reset();
                let mut stream = rng::derive_rng(seed, rng::purpose::REPLICA, &[replica]);
                walk_once(env, alphabet.as_ref(), n, replica, &mut stream, options)
            },
        )
        .collect()
}

/// M walkers through one shared quenched environment.
///
/// Walker randomness comes from `(walker_seed, index)` substreams and the
/// environment from `(env_seed, site)` substreams; the two never mix, which
/// is what makes the digest walker-independent. Walkers run sequentially:
/// callers parallelize over environments, not within one.
pub fn run_quenched(
    chain: &Arc<ChainAnalysis>,
    n: usize,
    walkers: u64,
    env_seed: u64,
    walker_seed: u64,
    options: SampleOptions,
) -> Result<QuenchedRun, SimError> {
    assert!(n >= 1, "run_quenched requires n >= 1");
    let alphabet = options
        .record_symbols
        .then(|| SymbolAlphabet::new(chain));
    let mut env = EnvironmentCache::quenched(chain.clone(), env_seed, n);
    let environment_digest = env.environment_digest().expect("quenched mode");
    let mut samples = Vec::with_capacity(walkers as usize);
    for walker in 0..walkers {
        let mut stream = rng::derive_rng(walker_seed, rng::purpose::WALKER, &[walker]);
        samples.push(walk_once(
            &mut env,
            alphabet.as_ref(),
            n,
            walker,
            &mut stream,
            options,
        )?);
    }
    Ok(QuenchedRun {
        samples,
        environment_digest,
    })
}

/// M walkers through one shared quenched environment, advanced in lockstep.
///
/// Equal in law to `run_quenched` (not realization-for-realization: the
/// environment is realized along a different filtration), at memory
/// proportional to distinct touched sites instead of sites times horizon.
/// All walkers move through global time together, so queries at one site
/// are time-ordered across walkers: the first query of a site draws its
/// state from pi, a query at the site's recorded time reads the recorded
/// state, and a later query bridges the gap with the p(gap) row. Because
/// sites evolve independently, pi and the gap row are the exact conditional
/// laws given everything realized so far, which is what makes the deferred
/// realization equivalent to fixing the environment up front.
///
/// State draws come from one environment stream and jump draws from
/// per-walker `(walker_seed, index)` substreams, so a walker's jump stream
/// consumption is independent of the others' trajectories. The digest
/// identifies `(model, env_seed, horizon)`; unlike `run_quenched` it cannot
/// depend on realized states, because which states get realized depends on
/// where walkers go.
pub fn run_quenched_lockstep(
    chain: &Arc<ChainAnalysis>,
    n: usize,
    walkers: u64,
    env_seed: u64,
    walker_seed: u64,
    options: SampleOptions,
) -> Result<QuenchedRun, SimError> {
    lockstep_with_guard(
        chain,
        n,
        walkers,
        env_seed,
        walker_seed,
        options,
        LOCKSTEP_SITE_GUARD,
    )
}

fn lockstep_with_guard(
    chain: &Arc<ChainAnalysis>,
    n: usize,
    walkers: u64,
    env_seed: u64,
    walker_seed: u64,
    options: SampleOptions,
    guard: usize,
) -> Result<QuenchedRun, SimError> {
    use rand::Rng;
    assert!(n >= 1, "run_quenched_lockstep requires n >= 1");
    let model = chain.model().clone();
    let d = model.dimension();
    let num_jumps = model.num_jumps();
    let alphabet = options
        .record_symbols
        .then(|| SymbolAlphabet::new(chain));
    let m = walkers as usize;

    let mut store = LazyStore::new(chain, n);
    let mut touched = 0usize;
    let mut env_stream = rng::derive_rng(env_seed, rng::purpose::SITE, &[]);
    let mut walker_streams: Vec<ChaCha8Rng> = (0..walkers)
        .map(|w| rng::derive_rng(walker_seed, rng::purpose::WALKER, &[w]))
        .collect();

    let mut positions = vec![vec![0i64; d]; m];
    let mut paths: Vec<Vec<Vec<i64>>> = if options.record_path {
        vec![Vec::with_capacity(n); m]
    } else {
        Vec::new()
    };
    let mut symbols: Vec<Vec<SymbolId>> = if options.record_symbols {
        vec![Vec::with_capacity(n); m]
    } else {
        Vec::new()
    };

    for time in 0..n as u64 {
        for w in 0..m {
            let state = match store.get(&positions[w]) {
                None => {
                    touched += 1;
                    if touched > guard {
                        return Err(SimError::EnvironmentTooLarge { guard });
                    }
                    chain.sample_stationary(env_stream.gen::<f64>()) as u16
                }
                Some((last, state)) if last == time => state,
                Some((last, state)) if last < time => {
                    let gap = (time - last) as usize;
                    chain.sample_state(state as usize, gap, env_stream.gen::<f64>()) as u16
                }
                Some((last, _)) => {
                    return Err(SimError::TimeOrderViolation { time, last });
                }
            };
            store.put(&positions[w], time, state);
            let jump = chain.sample_jump(state as usize, walker_streams[w].gen::<f64>());
            for (x, v) in positions[w].iter_mut().zip(&model.jumps()[jump]) {
                *x += v;
            }
            if options.record_path {
                paths[w].push(positions[w].clone());
            }
            if options.record_symbols {
                let id = alphabet
                    .as_ref()
                    .expect("alphabet present when recording symbols")
                    .id_of(state as usize, jump, num_jumps)
                    .expect("sampled symbols have positive probability");
                symbols[w].push(id);
            }
        }
    }

    let mut paths = paths.into_iter();
    let mut symbols = symbols.into_iter();
    let samples = positions
        .into_iter()
        .enumerate()
        .map(|(w, final_position)| WalkSample {
            replica: w as u64,
            final_position,
            path: options.record_path.then(|| paths.next().expect("one per walker")),
            symbols: options
                .record_symbols
                .then(|| symbols.next().expect("one per walker")),
        })
        .collect();
    Ok(QuenchedRun {
        samples,
        environment_digest: lockstep_digest(chain, env_seed, n),
    })
}

/// Identity of a lockstep environment: unlike the materialized digest it
/// hashes no trajectories, only what determines them.
fn lockstep_digest(chain: &ChainAnalysis, env_seed: u64, horizon: usize) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(b"lockstep-env");
    hasher.update(chain.model().digest().as_bytes());
    hasher.update(env_seed.to_le_bytes());
    hasher.update((horizon as u64).to_le_bytes());
    let bytes = hasher.finalize();
    u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use crate::pathlaw::PathLaw;
    use crate::presets;
    use rand::Rng;

    fn chain(model: ModelSpec) -> Arc<ChainAnalysis> {
        Arc::new(ChainAnalysis::new(Arc::new(model)).expect("valid model"))
    }

    #[test]
    fn deterministic_walk_is_exactly_linear() {
        let chain = chain(presets::constant_jump());
        let samples = run_annealed(&chain, 100, 5, 7, SampleOptions::default()).unwrap();
        for s in &samples {
            assert_eq!(s.final_position, vec![100]);
        }
    }

    #[test]
    fn first_visit_uses_the_stationary_law() {
        // The state draw consumes exactly the same uniform as a direct
        // stationary sample from a twin stream.
        let chain = chain(presets::two_state());
        let mut env = EnvironmentCache::annealed(chain.clone(), 1);
        for replica in 0..50u64 {
            env.reset();
            let mut walk_stream = rng::derive_rng(3, rng::purpose::REPLICA, &[replica]);
            let mut twin = walk_stream.clone();
            let (state, _) = env.step(&[0], 0, &mut walk_stream).unwrap();
            let expected = chain.sample_stationary(twin.gen::<f64>()) as u16;
            assert_eq!(state, expected);
        }
    }

    #[test]
    fn revisit_bridges_with_the_gap_row() {
        let chain = chain(presets::two_state());
        let mut env = EnvironmentCache::annealed(chain.clone(), 20);
        for (replica, gap) in [(0u64, 1u64), (1, 3), (2, 7), (3, 15)] {
            env.reset();
            let mut stream = rng::derive_rng(11, rng::purpose::REPLICA, &[replica]);
            let (first, _) = env.step(&[0], 0, &mut stream).unwrap();
            let mut twin = stream.clone();
            let (second, _) = env.step(&[0], gap, &mut stream).unwrap();
            let expected =
                chain.sample_state(first as usize, gap as usize, twin.gen::<f64>()) as u16;
            assert_eq!(second, expected);
        }
    }

    #[test]
    fn stale_query_is_rejected() {
        let chain = chain(presets::two_state());
        let mut env = EnvironmentCache::annealed(chain.clone(), 10);
        let mut stream = rng::derive_rng(0, rng::purpose::REPLICA, &[0]);
        env.step(&[0], 5, &mut stream).unwrap();
        let err = env.step(&[0], 5, &mut stream).unwrap_err();
        assert!(matches!(
            err,
            SimError::TimeOrderViolation { time: 5, last: 5 }
        ));
    }

    #[test]
    fn quenched_horizon_is_enforced() {
        let chain = chain(presets::two_state());
        let mut env = EnvironmentCache::quenched(chain.clone(), 1, 10);
        let mut stream = rng::derive_rng(0, rng::purpose::WALKER, &[0]);
        env.step(&[0], 9, &mut stream).unwrap();
        let err = env.step(&[0], 10, &mut stream).unwrap_err();
        assert!(matches!(
            err,
            SimError::HorizonExceeded {
                time: 10,
                horizon: 10
            }
        ));
    }

    #[test]
    fn touch_order_cannot_change_the_realization() {
        let chain = chain(presets::two_state());
        let horizon = 64;
        let sites: Vec<Vec<i64>> = (-5..=5).map(|x| vec![x]).collect();
        let mut forward = EnvironmentCache::quenched(chain.clone(), 99, horizon);
        let mut backward = EnvironmentCache::quenched(chain.clone(), 99, horizon);
        let mut seen_forward = Vec::new();
        for site in &sites {
            let Mode::Quenched(store) = &mut forward.mode else {
                unreachable!()
            };
            seen_forward.push(store.trajectory(&chain, site).unwrap().to_vec());
        }
        let mut seen_backward = Vec::new();
        for site in sites.iter().rev() {
            let Mode::Quenched(store) = &mut backward.mode else {
                unreachable!()
            };
            seen_backward.push(store.trajectory(&chain, site).unwrap().to_vec());
        }
        seen_backward.reverse();
        assert_eq!(seen_forward, seen_backward);
    }

    #[test]
    fn quenched_digest_ignores_walker_seed_and_activity() {
        let chain = chain(presets::two_state());
        let a = run_quenched(&chain, 50, 3, 42, 1, SampleOptions::default()).unwrap();
        let b = run_quenched(&chain, 50, 17, 42, 2, SampleOptions::default()).unwrap();
        assert_eq!(a.environment_digest, b.environment_digest);
        let c = run_quenched(&chain, 50, 3, 43, 1, SampleOptions::default()).unwrap();
        assert_ne!(a.environment_digest, c.environment_digest);
        let d = run_quenched(&chain, 49, 3, 42, 1, SampleOptions::default()).unwrap();
        assert_ne!(a.environment_digest, d.environment_digest);
    }

    #[test]
    fn same_walker_seed_reproduces_samples_bitwise() {
        let chain = chain(presets::two_state());
        let opts = SampleOptions {
            record_path: true,
            record_symbols: true,
        };
        let a = run_quenched(&chain, 30, 5, 7, 9, opts).unwrap();
        let b = run_quenched(&chain, 30, 5, 7, 9, opts).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.final_position, y.final_position);
            assert_eq!(x.path, y.path);
            assert_eq!(x.symbols, y.symbols);
        }
    }

    #[test]
    fn annealed_samples_are_schedule_independent() {
        // Thread count must not leak into the output.
        let chain = chain(presets::two_state());
        let sequential: Vec<WalkSample> = {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(1)
                .build()
                .unwrap();
            pool.install(|| run_annealed(&chain, 64, 200, 5, SampleOptions::default()).unwrap())
        };
        let parallel: Vec<WalkSample> = {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(4)
                .build()
                .unwrap();
            pool.install(|| run_annealed(&chain, 64, 200, 5, SampleOptions::default()).unwrap())
        };
        for (a, b) in sequential.iter().zip(&parallel) {
            assert_eq!(a.replica, b.replica);
            assert_eq!(a.final_position, b.final_position);
        }
    }

    #[test]
    fn paths_accumulate_supported_jumps() {
        let chain = chain(presets::tri_d2());
        let jumps = chain.model().jumps().to_vec();
        let opts = SampleOptions {
            record_path: true,
            record_symbols: true,
        };
        let samples = run_annealed(&chain, 40, 20, 13, opts).unwrap();
        for s in samples {
            let path = s.path.as_ref().unwrap();
            assert_eq!(path.last().unwrap(), &s.final_position);
            let mut prev = vec![0i64; 2];
            for pos in path {
                let step: Vec<i64> = pos.iter().zip(&prev).map(|(a, b)| a - b).collect();
                assert!(jumps.contains(&step), "unsupported jump {step:?}");
                prev = pos.clone();
            }
            assert_eq!(s.symbols.as_ref().unwrap().len(), 40);
        }
    }

    #[test]
    fn symbol_history_matches_final_position() {
        let chain = chain(presets::two_state());
        let law = PathLaw::new(chain.clone());
        let opts = SampleOptions {
            record_symbols: true,
            ..Default::default()
        };
        let samples = run_annealed(&chain, 25, 50, 21, opts).unwrap();
        for s in samples {
            let total: i64 = s
                .symbols
                .as_ref()
                .unwrap()
                .iter()
                .map(|&id| law.alphabet().displacement(id)[0])
                .sum();
            assert_eq!(total, s.final_position[0]);
        }
    }

    #[test]
    fn iid_moments_match_the_binomial_walk() {
        let chain = chain(presets::iid_d1());
        let n = 400;
        let replicas = 20_000u64;
        let samples = run_annealed(&chain, n, replicas, 31, SampleOptions::default()).unwrap();
        let mean: f64 = samples
            .iter()
            .map(|s| s.final_position[0] as f64)
            .sum::<f64>()
            / replicas as f64;
        let var: f64 = samples
            .iter()
            .map(|s| (s.final_position[0] as f64 - mean).powi(2))
            .sum::<f64>()
            / (replicas - 1) as f64;
        let expect_mean = 0.5 * n as f64;
        let expect_var = 0.75 * n as f64;
        let se_mean = (expect_var / replicas as f64).sqrt();
        assert!(
            (mean - expect_mean).abs() < 4.0 * se_mean,
            "mean {mean} vs {expect_mean}"
        );
        // Chi-square concentration: SD of the sample variance is about
        // var * sqrt(2 / replicas).
        let se_var = expect_var * (2.0 / replicas as f64).sqrt();
        assert!(
            (var - expect_var).abs() < 5.0 * se_var,
            "var {var} vs {expect_var}"
        );
    }

    #[test]
    fn single_state_quenched_equals_annealed_in_law() {
        // With one state the environment is irrelevant; identical walker
        // streams must then produce identical walks in both modes.
        let chain = chain(presets::iid_d1());
        let quenched = run_quenched(&chain, 100, 10, 5, 77, SampleOptions::default()).unwrap();
        let mut env = EnvironmentCache::annealed(chain.clone(), 100);
        for (w, sample) in quenched.samples.iter().enumerate() {
            env.reset();
            let mut stream = rng::derive_rng(77, rng::purpose::WALKER, &[w as u64]);
            // Annealed draws one extra uniform per step for the state; with
            // a single state the quenched jump draw is the first uniform.
            // Replay manually instead: both must agree on the jump law.
            let mut position = 0i64;
            for _ in 0..100 {
                let state = chain.sample_stationary(0.0) as u16;
                assert_eq!(state, 0);
                let jump = chain.sample_jump(0, stream.gen::<f64>());
                position += chain.model().jumps()[jump][0];
            }
            assert_eq!(position, sample.final_position[0], "walker {w}");
        }
    }

    #[test]
    fn lockstep_collapses_deterministic_walkers() {
        // Deterministic jumps: co-located walkers read the same realized
        // state and must jump identically, so they can never separate.
        let chain = chain(presets::two_state());
        let opts = SampleOptions {
            record_path: true,
            ..Default::default()
        };
        let run = run_quenched_lockstep(&chain, 50, 8, 3, 99, opts).unwrap();
        let first = &run.samples[0];
        for s in &run.samples[1..] {
            assert_eq!(s.final_position, first.final_position);
            assert_eq!(s.path, first.path);
        }
    }

    #[test]
    fn lockstep_is_reproducible_and_digest_tracks_environment_only() {
        let chain = chain(presets::tri_d2());
        let a = run_quenched_lockstep(&chain, 40, 6, 5, 1, SampleOptions::default()).unwrap();
        let b = run_quenched_lockstep(&chain, 40, 6, 5, 1, SampleOptions::default()).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.final_position, y.final_position);
        }
        let c = run_quenched_lockstep(&chain, 40, 11, 5, 2, SampleOptions::default()).unwrap();
        assert_eq!(a.environment_digest, c.environment_digest);
        let d = run_quenched_lockstep(&chain, 40, 6, 6, 1, SampleOptions::default()).unwrap();
        assert_ne!(a.environment_digest, d.environment_digest);
        let e = run_quenched_lockstep(&chain, 41, 6, 5, 1, SampleOptions::default()).unwrap();
        assert_ne!(a.environment_digest, e.environment_digest);
    }

    #[test]
    fn lockstep_single_walker_has_the_annealed_law() {
        // A lone walker's lockstep marginal is the annealed path law:
        // endpoint frequencies over many environments must match the exact
        // enumeration.
        let chain = chain(presets::two_state());
        let law = PathLaw::new(chain.clone());
        let n = 8usize;
        let b = law.alphabet().len();
        let mut endpoint_prob: std::collections::BTreeMap<i64, f64> =
            std::collections::BTreeMap::new();
        for index in 0..b.pow(n as u32) {
            let word = law.alphabet().word_from_index(index, n);
            let prob = law.exact_word_probability(&word);
            if prob == 0.0 {
                continue;
            }
            let displacement: i64 = word
                .iter()
                .map(|&id| law.alphabet().displacement(id)[0])
                .sum();
            *endpoint_prob.entry(displacement).or_insert(0.0) += prob;
        }
        let environments = 4000u64;
        let mut counts: std::collections::BTreeMap<i64, u64> = std::collections::BTreeMap::new();
        for env in 0..environments {
            let run =
                run_quenched_lockstep(&chain, n, 1, env, env ^ 0x5a5a, SampleOptions::default())
                    .unwrap();
            *counts.entry(run.samples[0].final_position[0]).or_insert(0) += 1;
        }
        let support: Vec<i64> = endpoint_prob.keys().copied().collect();
        let observed: Vec<u64> = support.iter().map(|x| *counts.get(x).unwrap_or(&0)).collect();
        let expected: Vec<f64> = support.iter().map(|x| endpoint_prob[x]).collect();
        let stray: u64 = counts
            .iter()
            .filter(|(x, _)| !endpoint_prob.contains_key(x))
            .map(|(_, c)| c)
            .sum();
        assert_eq!(stray, 0, "endpoints outside the exact support");
        let test = crate::stats::chi_square_gof(&observed, &expected);
        assert!(
            test.p_value > 1e-3,
            "chi-square p {} stat {}",
            test.p_value,
            test.statistic
        );
    }

    #[test]
    fn lockstep_site_guard_trips() {
        // constant_jump touches a fresh site every step.
        let chain = chain(presets::constant_jump());
        let err = lockstep_with_guard(&chain, 10, 1, 0, 0, SampleOptions::default(), 4)
            .unwrap_err();
        assert!(matches!(err, SimError::EnvironmentTooLarge { guard: 4 }));
    }

    #[test]
    fn lockstep_symbols_accumulate_to_the_endpoint() {
        let chain = chain(presets::full2d());
        let law = PathLaw::new(chain.clone());
        let opts = SampleOptions {
            record_symbols: true,
            ..Default::default()
        };
        let run = run_quenched_lockstep(&chain, 30, 4, 8, 2, opts).unwrap();
        for s in &run.samples {
            let mut total = vec![0i64; 2];
            for &id in s.symbols.as_ref().unwrap() {
                for (t, v) in total.iter_mut().zip(law.alphabet().displacement(id)) {
                    *t += v;
                }
            }
            assert_eq!(total, s.final_position);
        }
    }

    #[test]
    fn quenched_cell_guard_trips() {
        let chain = chain(presets::two_state());
        // Horizon chosen so two touched sites exceed the guard.
        let horizon = QUENCHED_CELL_GUARD / 2 + 1;
        let mut env = EnvironmentCache::quenched(chain.clone(), 1, horizon);
        let Mode::Quenched(store) = &mut env.mode else {
            unreachable!()
        };
        store.trajectory(&chain, &[0]).unwrap();
        let err = store.trajectory(&chain, &[1]).unwrap_err();
        assert!(matches!(err, SimError::EnvironmentTooLarge { .. }));
    }
}
