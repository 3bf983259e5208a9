"""Threat knowledge graphs from CPE/CVE/CWE data, with link prediction.

The toolkit parses public vulnerability databases into records, builds
an optimized knowledge graph out of their associations, trains
translational or semantic-matching embeddings on it, and predicts
associations that are not yet in the databases.
"""

from .errors import (
    IncompatibleGraphsError,
    InputFormatError,
    ThreatKgError,
    TrainingDiverged,
    UnknownEntityError,
)
from .graph import (
    BuildOptions,
    EntityClass,
    KnowledgeGraph,
    Triple,
    build_graph,
    classify_entity,
    diff_snapshots,
    extend_with_capec,
    extend_with_cvss,
    filter_by_date,
    load_graph,
    merge_cpe_versions,
    remove_unconnected,
    save_graph,
)
from .ingest import (
    parse_capec_catalog,
    parse_cpe_dictionary,
    parse_cve_feed,
    parse_cwe_catalog,
)
from .models import EmbeddingModel, load_model, save_model
from .prediction import Prediction, batch_predict, predict_associations
from .records import CapecRecord, CpeRecord, CveRecord, CvssVector, CweRecord
from .training import TrainConfig, TrainResult, grid_search, loss, sample_negatives, train
from .evaluation import (
    PrPoint,
    RankMetrics,
    build_pr_testset,
    closed_world_split,
    compute_metrics,
    open_world_testset,
    pr_curve,
    rank_triple,
    score_to_probability,
)

__version__ = "0.1.0"
