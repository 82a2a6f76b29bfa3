"""Hard majority voting over member scores and the jointly trained
concatenation ensemble."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError, StateError
from .metrics import MetricsReport, report_from_scores
from .nn import GraphBuilder, Network
from .optim import evaluate

_TIE_BREAKS = ("higher_confidence", "positive", "negative")


@dataclass
class VoteConfig:
    threshold: float = 0.5
    tie_break: str = "higher_confidence"

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ParameterError(f"vote threshold must be in (0, 1), got {self.threshold}")
        if self.tie_break not in _TIE_BREAKS:
            raise ParameterError(
                f"tie_break must be one of {_TIE_BREAKS}, got {self.tie_break!r}"
            )


def majority_vote(score_sets, cfg: VoteConfig | None = None) -> np.ndarray:
    """Per-sample majority over each model's thresholded scores.

    Exact vote ties fall to cfg.tie_break; the default higher_confidence
    rule takes the label of the model whose raw score is farthest from the
    threshold, and when that distance is itself tied across disagreeing
    models the positive label wins (keeps the result order-invariant).
    """
    cfg = cfg or VoteConfig()
    if len(score_sets) < 2:
        raise ParameterError(f"majority_vote needs >= 2 score sets, got {len(score_sets)}")
    arrs = [np.asarray(s, dtype=np.float64).reshape(-1) for s in score_sets]
    n = arrs[0].size
    for k, a in enumerate(arrs):
        if a.size != n:
            raise ParameterError(
                f"majority_vote: score set 0 has {n} samples, set {k} has {a.size}"
            )
    scores = np.stack(arrs)  # [m, n]
    votes = scores >= cfg.threshold
    pos_votes = votes.sum(axis=0)
    m = scores.shape[0]
    out = (2 * pos_votes > m).astype(np.int64)

    tied = 2 * pos_votes == m  # only possible for even m
    if tied.any():
        if cfg.tie_break == "positive":
            out[tied] = 1
        elif cfg.tie_break == "negative":
            out[tied] = 0
        else:
            dist = np.abs(scores[:, tied] - cfg.threshold)
            top = dist == dist.max(axis=0, keepdims=True)
            # positive wins when the farthest-from-threshold models disagree
            out[tied] = (top & votes[:, tied]).any(axis=0).astype(np.int64)
    return out


def _penultimate_index(net: Network) -> int:
    """Node index of the feature vector feeding the final dense unit; a head
    dropout directly below the dense is skipped (the joint head adds its
    own)."""
    out_node = net.nodes[-1]
    head = net.nodes[out_node.inputs[0]]
    if head.kind != "dense":
        raise ParameterError(
            f"member {net.name!r} does not end in dense -> sigmoid"
        )
    feat = head.inputs[0]
    if net.nodes[feat].kind == "dropout":
        feat = net.nodes[feat].inputs[0]
    return feat


def penultimate_width(net: Network) -> int:
    shape = net.node_shapes[_penultimate_index(net)]
    return int(np.prod(shape))


def _replay_member(g: GraphBuilder, member: Network, prefix: str,
                   reuse_weights: bool) -> int:
    """Copy the ancestor subgraph of the member's penultimate node into g
    (weights carried over as presets unless ``reuse_weights`` is off);
    returns the new feature index."""
    feat = _penultimate_index(member)
    needed = {feat}
    stack = [feat]
    while stack:
        for j in member.nodes[stack.pop()].inputs:
            if j not in needed:
                needed.add(j)
                stack.append(j)
    mapping = {0: 0}
    for i in sorted(needed):
        if i == 0:
            continue
        node = member.nodes[i]
        preset = dict(node.params) if node.params and reuse_weights else None
        mapping[i] = g._add(
            node.kind,
            [mapping[j] for j in node.inputs],
            f"{prefix}{node.name}",
            dict(node.attrs),
            preset=preset,
        )
    return mapping[feat]


def build_concat_ensemble(members: list[Network], seed: int = 0,
                          head_dropout: float = 0.2,
                          reuse_weights: bool = True) -> Network:
    """One shared input fanning out to every member backbone, penultimate
    vectors flattened and concatenated into a fresh dropout -> dense(1) ->
    sigmoid head. Member weights are carried over by default and stay
    trainable (``reuse_weights=False`` re-initializes everything from the
    seed instead); the members' own output layers are discarded."""
    if len(members) < 2:
        raise ParameterError(f"concat ensemble needs >= 2 members, got {len(members)}")
    base = members[0].input_shape
    for k, m in enumerate(members):
        if m.input_shape != base:
            raise ShapeError(
                f"member 0 input shape {base} vs member {k} {m.input_shape}"
            )
    g = GraphBuilder(base)
    feats = []
    for k, m in enumerate(members):
        f = _replay_member(g, m, f"m{k}_", reuse_weights)
        if len(g.shapes[f]) != 1:
            f = g.flatten(f, name=f"m{k}_feat_flatten")
        feats.append(f)
    c = g.concat(feats, name="joint_concat")
    d = g.dropout(c, head_dropout, name="joint_dropout")
    out = g.dense(d, 1, name="joint_dense")
    g.sigmoid(out, name="joint_sigmoid")
    return g.build("concat_ensemble", seed)


def evaluate_ensemble(kind: str, members_or_joint, dataset, cfg: VoteConfig | None = None,
                      batch_size: int = 64, model_name: str | None = None) -> MetricsReport:
    """Score an ensemble on a dataset.

    kind "vote": members are evaluated independently and combined by
    majority_vote; the report carries hard-label metrics only (auc None).
    kind "concat": the joint network is scored like any single model, all
    five metrics included.
    """
    if kind == "vote":
        members = list(members_or_joint)
        if len(members) < 2:
            raise ParameterError(f"vote ensemble needs >= 2 members, got {len(members)}")
        for m in members:
            if not m.trained:
                raise StateError(f"vote member {m.name!r} has not been trained")
        score_sets = [evaluate(m, dataset, batch_size)[1] for m in members]
        preds = majority_vote(score_sets, cfg)
        return report_from_scores(preds, dataset.labels,
                                  model_name or "Majority Vote", include_auc=False)
    if kind == "concat":
        joint = members_or_joint
        if not isinstance(joint, Network):
            raise ParameterError("concat evaluation expects a single joint Network")
        if not joint.trained:
            raise StateError("joint concat ensemble has not been trained")
        _, scores = evaluate(joint, dataset, batch_size)
        return report_from_scores(scores, dataset.labels,
                                  model_name or "Concatenation Ensemble")
    raise ParameterError(f"unknown ensemble kind {kind!r}")
