"""Two-stage expert routing for multiple-choice AIOps question answering.

An LLM classifier (optionally given retrieved, labelled examples) names the
question's task; a benchmark-derived table sends the question to the expert
model that scored best on that task.
"""

__version__ = "0.1.0"

from .dataset import Dataset, Question, TaskLabel, load_dataset, task_counts
from .errors import (
    CheckpointError,
    CoeOpsError,
    ConfigurationError,
    ContentFilterError,
    CoverageError,
    IntegrityError,
    RowError,
    SchemaError,
    TransportError,
)
from .leaderboard import (
    CapabilityMatrix,
    ExpertRef,
    TaskExpertMap,
    build_matrix,
    build_task_expert_map,
    compute_accuracy,
    select_best,
    select_unknown,
)

__all__ = [
    "CapabilityMatrix",
    "CheckpointError",
    "CoeOpsError",
    "ConfigurationError",
    "ContentFilterError",
    "CoverageError",
    "Dataset",
    "ExpertRef",
    "IntegrityError",
    "Question",
    "RowError",
    "SchemaError",
    "TaskExpertMap",
    "TaskLabel",
    "TransportError",
    "build_matrix",
    "build_task_expert_map",
    "compute_accuracy",
    "load_dataset",
    "select_best",
    "select_unknown",
    "task_counts",
]
