pub mod limits;
pub mod model;
pub mod pathlaw;
pub mod presets;
pub mod rng;
pub mod sim;
pub mod stats;
pub mod transfer;
pub mod util;

pub use limits::{Degeneracy, DegeneracyCertificate, DiffusionReport, LimitsError};
pub use sim::{
    run_annealed, run_quenched, run_quenched_lockstep, EnvironmentCache, QuenchedRun,
    SampleOptions, SimError, WalkSample,
};
pub use model::{ChainAnalysis, ModelError, ModelSpec};
pub use pathlaw::{PathLaw, PathLawError, StandardPast, Symbol, SymbolAlphabet, SymbolId, WalkLaw};
pub use stats::{CLTVerdict, CltOptions, KsTest, MixingFit, MixingMode, QuenchedVerdict, StatsError};
pub use transfer::{Operator, RPFAnalysis, TransferError, TruncatedPastFunction};
