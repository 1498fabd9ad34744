"""Linear and affine relational operators on a small trained transformer."""
from lrelab.evaluation import EvalReport, classify_suffix, faithfulness, sweep, unique_start_tokens
from lrelab.lre import (
    LinearRelationalEmbedding,
    OperatorKind,
    RelationalOperator,
    apply,
    estimate,
    load_operator,
    save_operator,
)
from lrelab.model import ModelConfig, Parameters, Wiring, build_model, forward_trace, predict_next
from lrelab.projection import GramSchmidtProjector, beta_sweep, bias_concept_cosine, gs_basis
from lrelab.relations import RelationCategory, RelationPair, Vocab, build_prompt, split_pairs
from lrelab.synthetic import SyntheticSpec, generate_synthetic
from lrelab.trainer import TrainConfig, train

__version__ = "0.1.0"
