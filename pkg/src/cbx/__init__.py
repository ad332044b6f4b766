"""Concept-bottleneck fraud models with golden, noisy, and mixed concept labels."""

from .nn import (
    DenseLayer,
    ParamGradients,
    backward,
    categorical_ce,
    forward,
    init_layers,
    load_checkpoint,
    multilabel_bce,
    save_checkpoint,
    sgd_step,
    sigmoid_elementwise,
    softmax_rows,
)
from .model import (
    ConceptBottleneckModel,
    Prediction,
    build_model,
    load_model,
    meta_loss,
    predict,
    save_model,
    train_step,
)
from .weak_labels import (
    ConceptTaxonomy,
    RuleConceptMap,
    annotate,
    annotate_dataset,
    jaccard,
    load_rule_map,
    load_taxonomy,
)
from .synthgen import (
    GenConfig,
    SyntheticDataset,
    TransactionRecord,
    generate,
    load_dataset,
    report,
    write_dataset,
)
from .training import (
    BatchPlan,
    FinetuneConfig,
    StrategyConfig,
    TrainingTrace,
    fine_tune,
    make_batches,
    pretrain,
    run_strategy,
    train_hybrid,
    train_supervised,
)
from .metrics import (
    EvalReport,
    average_precision,
    evaluate_model,
    mean_average_precision,
    pareto_front,
    recall_at_fpr,
    threshold_at_fpr,
)
from .experiment import (
    GridSpec,
    RunRecord,
    benchmark_gen_config,
    benchmark_strategies,
    default_grid,
    emit_tradeoff_plot,
    run_grid,
    select_pareto,
)

__version__ = "0.1.0"
