"""agentpipe: a declarative agent-workflow engine.

Pipelines are authored as (or compiled to) a canonical JSON intermediate
representation, statically validated and optimized, then deterministically
interpreted with pluggable LLM, tool, and function backends. A versioned
registry provides hot reload and A/B experiment routing.
"""

from .analysis import (
    Finding,
    SignatureSet,
    ValidationReport,
    eliminate_dead_code,
    fuse_steps,
    optimize,
    plan_parallel,
    validate,
)
from .canonical import canonical_json
from .errors import BudgetExhaustedError, EngineError, PipelineRuntimeError, TransientError
from .executor import (
    CacheConfig,
    ExecConfig,
    ExecutionResult,
    FunctionBinding,
    FunctionContext,
    MemoCache,
    ParallelConfig,
    RealClock,
    Registries,
    Response,
    RetryConfig,
    RunMetrics,
    VirtualClock,
    execute,
    memo_key,
)
from .ir import (
    Condition,
    Expr,
    Pipeline,
    PipelineDigest,
    Step,
    count_steps,
    hash_pipeline,
    parse_ir,
    serialize_ir,
)
from .orchestration import (
    LLMBinding,
    LLMConfig,
    Message,
    MockLLMClient,
    MockScript,
    ToolCall,
    ToolParam,
    ToolSpec,
    WindowConfig,
    prune_history,
)
from .registry import (
    ExperimentConfig,
    ExperimentReport,
    PipelineRegistry,
    Variant,
    load_directory,
    route,
)
from .values import (
    ABSENT,
    coerce,
    eval_condition,
    find_matching_item,
    interpolate,
    marshal,
    parse_path,
    resolve_path,
    unmarshal_list,
    unmarshal_map,
)

__version__ = "0.1.0"
