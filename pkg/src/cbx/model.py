"""Concept-bottleneck multi-task network.

A shared trunk feeds a sigmoid concept head with k outputs; the softmax
decision head consumes only those k concept probabilities, so every
decision is a function of the predicted concepts alone. The training loss
is alpha * decision_ce + (1 - alpha) * concept_bce.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import DenseLayer, ParamGradients

MODEL_CONCEPTS_TAG = "concepts"


@dataclass
class ConceptBottleneckModel:
    trunk: list[DenseLayer]
    explain_head: DenseLayer
    decision_head: DenseLayer
    concept_names: list[str]

    def __post_init__(self):
        k = self.explain_head.out_dim
        if self.explain_head.activation != "sigmoid":
            raise ValueError("explain head must use sigmoid activation")
        if self.decision_head.activation != "softmax":
            raise ValueError("decision head must use softmax activation")
        if self.decision_head.in_dim != k:
            raise ValueError(
                f"decision head consumes {self.decision_head.in_dim} inputs "
                f"but the concept head produces {k}"
            )
        if len(self.concept_names) != k:
            raise ValueError(f"{len(self.concept_names)} concept names for {k} outputs")
        if self.trunk and self.trunk[-1].out_dim != self.explain_head.in_dim:
            raise ValueError("trunk output dim does not match explain head input dim")

    @property
    def concept_count(self) -> int:
        return self.explain_head.out_dim

    @property
    def class_count(self) -> int:
        return self.decision_head.out_dim

    @property
    def input_dim(self) -> int:
        return self.trunk[0].in_dim if self.trunk else self.explain_head.in_dim

    def layers(self) -> list[DenseLayer]:
        """All layers in forward order: trunk, concept head, decision head."""
        return [*self.trunk, self.explain_head, self.decision_head]

    def copy(self) -> "ConceptBottleneckModel":
        return ConceptBottleneckModel(
            [l.copy() for l in self.trunk],
            self.explain_head.copy(),
            self.decision_head.copy(),
            list(self.concept_names),
        )


@dataclass
class Prediction:
    """concepts: (n, k) probabilities in (0,1); decision: (n, m) simplex rows."""

    concepts: np.ndarray
    decision: np.ndarray


def build_model(
    input_dim: int,
    hidden_dims,
    concept_names,
    class_count: int = 2,
    seed=0,
    hidden_activation: str = "relu",
) -> ConceptBottleneckModel:
    """Initialize a bottleneck model with Glorot-uniform weights."""
    concept_names = list(concept_names)
    k = len(concept_names)
    dims = [input_dim, *hidden_dims, k, class_count]
    acts = [hidden_activation] * len(hidden_dims) + ["sigmoid", "softmax"]
    layers = nn.init_layers(dims, acts, seed)
    return ConceptBottleneckModel(layers[:-2], layers[-2], layers[-1], concept_names)


def predict(model: ConceptBottleneckModel, x: np.ndarray) -> Prediction:
    """Forward pass: concept probabilities, then a decision over them."""
    acts = nn.forward(model.layers(), x)
    return Prediction(concepts=acts[-2], decision=acts[-1])


def meta_loss(pred: Prediction, y_d, y_e, concept_mask, alpha: float):
    """Return (total, decision_part, explain_part).

    total = alpha * decision_part + (1 - alpha) * explain_part, both parts
    averaged per batch. Rows with concept_mask off contribute nothing to
    the explain part but still count toward the decision part.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    decision_part = nn.categorical_ce(pred.decision, y_d)
    explain_part = nn.multilabel_bce(pred.concepts, y_e, concept_mask)
    total = alpha * decision_part + (1.0 - alpha) * explain_part
    return total, decision_part, explain_part


def loss_gradients(model: ConceptBottleneckModel, x, y_d, y_e, concept_mask, alpha: float):
    """One forward/backward pass; returns (ParamGradients, loss triple).

    The decision loss backpropagates through the decision head into the
    concept probabilities and onward through the trunk, so the concept
    head receives gradient even at alpha = 1. The gradient list follows
    model.layers() order.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    layers = model.layers()
    acts = nn.forward(layers, x)
    concepts, decision = acts[-2], acts[-1]

    # Decision head: fused softmax cross-entropy gradient w.r.t. logits.
    g_logits = alpha * nn.softmax_ce_grad(decision, y_d)
    head_grads, g_concepts = nn.backward([model.decision_head], concepts, [decision], g_logits)

    # Concept probabilities collect gradient from both tasks.
    g_concepts = g_concepts + (1.0 - alpha) * nn.multilabel_bce_grad(concepts, y_e, concept_mask)
    body = [*model.trunk, model.explain_head]
    body_grads, _ = nn.backward(body, x, acts[:-1], g_concepts)

    grads = ParamGradients(
        body_grads.weight_grads + head_grads.weight_grads,
        body_grads.bias_grads + head_grads.bias_grads,
    )
    pred = Prediction(concepts, decision)
    return grads, meta_loss(pred, y_d, y_e, concept_mask, alpha)


def train_step(
    model: ConceptBottleneckModel,
    x,
    y_d,
    y_e,
    concept_mask,
    alpha: float,
    learning_rate: float,
    freeze_trunk: bool = False,
):
    """One mini-batch gradient step; updates the model in place.

    Returns the loss triple evaluated before the update.
    """
    if np.asarray(x).shape[0] == 0:
        raise ValueError("train_step requires a nonempty batch")
    grads, losses = loss_gradients(model, x, y_d, y_e, concept_mask, alpha)
    freeze = [freeze_trunk] * len(model.trunk) + [False, False]
    nn.sgd_step(model.layers(), grads, learning_rate, freeze)
    return losses


def save_model(model: ConceptBottleneckModel, path):
    """nn checkpoint format plus a concepts header recording label order.

    Concept names may contain spaces, so the header is tab-delimited.
    """
    for name in model.concept_names:
        if "\t" in name or "\n" in name:
            raise ValueError(f"concept name {name!r} contains tab or newline")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{nn.CHECKPOINT_MAGIC}\n")
        fh.write("\t".join([MODEL_CONCEPTS_TAG, *model.concept_names]) + "\n")
        nn.write_layers(model.layers(), fh)


def load_model(path) -> ConceptBottleneckModel:
    with open(path, "r", encoding="utf-8") as fh:
        magic = fh.readline().strip()
        if magic != nn.CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (bad header {magic!r})")
        header = fh.readline().rstrip("\n").split("\t")
        if header[0] != MODEL_CONCEPTS_TAG:
            raise ValueError("model checkpoint is missing the concepts header")
        concept_names = header[1:]
        layers = nn.read_layers(fh)
    if len(layers) < 2:
        raise ValueError("model checkpoint must contain at least two layers")
    return ConceptBottleneckModel(layers[:-2], layers[-2], layers[-1], concept_names)
