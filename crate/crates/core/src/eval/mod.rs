pub mod locomo;
pub mod metrics;
pub mod report;

pub use locomo::{Category, CategoryMap, Conversation, Dataset, LoadError, QaInstance};
pub use metrics::{bleu1, token_f1};
pub use report::{run_eval, EvalConfig, EvalError, MemoryStats, MetricsReport};
