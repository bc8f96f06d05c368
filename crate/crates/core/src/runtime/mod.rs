//! Real-mode execution against a chat-completions backend, tool stubs,
//! run configuration, and persistence.

mod backend;
mod config;
mod persist;
mod pipeline;
mod plans;
mod tools;

pub use backend::{
    call_with_retry, parse_response, BackendEndpoint, ChatMessage, ChatRequest, ChatResponse, ChatTransport,
    HttpTransport, MockTransport,
};
pub use config::{dump_config, load_atoms, load_config, parse_config, EnvSettings, Mode, RealSettings, RunConfig, SuiteKind};
pub use persist::{load_buffer, persist_buffer};
pub use pipeline::{
    evaluate, run_search, run_training, workflow_counts, workflow_frontier, write_json, write_jsonl, EvalReport, FixedPolicy,
    RunEnv, SearchMethod, SearchReport, TrainReport,
};
pub use plans::{
    execute_real, load_queries, normalize_answer, RealEnv, RealExecutor, RealTask, Stage, WorkflowPlan, ACCEPT,
    AGENT_ITERATIONS, FAN_OUT, MAX_REFINEMENTS,
};
pub use tools::{evaluate_expression, parse_directives, ToolBox, ToolCall};
