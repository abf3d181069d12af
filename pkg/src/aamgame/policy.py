"""Heterogeneous graph attention encoder-decoder policy and its ablations."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from . import tensor as tn
from .obsgraph import (
    DEPOT,
    GRAPH,
    HDG_RELATIONS,
    HIG_RELATIONS,
    HIG_WIDTHS,
    PAYLOAD,
    RELATIONS,
    VALUE,
    VEHICLE,
    HeteroGraph,
    build_hdg,
    observation,
)
from .sim import WorldState

ARCHITECTURES = ("encdec", "hetgat", "hetgcn")

ENCODER_LAYERS = ((32, 8), (32, 8), (64, 1))  # (output width, heads)
DECODER_LAYERS = ((48, 8), (64, 1))
GRAPH_WIDTH = 3 * 64
VALUE_INIT_WIDTH = 32
VALUE_HIDDEN = 64


@dataclass
class GraphBatch:
    """Disjoint union of graphs with node -> graph membership per type."""

    num_graphs: int
    num_nodes: dict[str, int]
    edges: dict[str, tuple[torch.Tensor, torch.Tensor]]
    features: dict[str, torch.Tensor]
    graph_index: dict[str, torch.Tensor]


def batch_graphs(graphs: Sequence[HeteroGraph], dtype=torch.float64) -> GraphBatch:
    types = sorted({t for g in graphs for t in g.num_nodes})
    offsets = {t: 0 for t in types}
    edge_parts: dict[str, list] = {}
    feat_parts: dict[str, list] = {t: [] for t in types}
    member: dict[str, list] = {t: [] for t in types}
    for b, g in enumerate(graphs):
        for rel, (src, dst) in g.edges.items():
            s_type, d_type = RELATIONS[rel]
            edge_parts.setdefault(rel, []).append((src + offsets[s_type], dst + offsets[d_type]))
        for t in types:
            n = g.num_nodes.get(t, 0)
            if t in g.features:
                feat_parts[t].append(g.features[t])
            member[t].append(np.full(n, b, dtype=np.int64))
            offsets[t] += n
    edges = {}
    for rel, parts in edge_parts.items():
        src = np.concatenate([p[0] for p in parts])
        dst = np.concatenate([p[1] for p in parts])
        edges[rel] = (torch.from_numpy(src), torch.from_numpy(dst))
    features = {
        t: torch.from_numpy(np.concatenate(parts, axis=0)).to(dtype)
        for t, parts in feat_parts.items()
        if parts
    }
    graph_index = {t: torch.from_numpy(np.concatenate(member[t])) for t in types}
    return GraphBatch(len(graphs), dict(offsets), edges, features, graph_index)


@lru_cache(maxsize=64)
def _decoder_batch(num_depots: int, num_graphs: int) -> GraphBatch:
    return batch_graphs([build_hdg(num_depots)] * num_graphs)


class HetGATLayer(nn.Module):
    """One relation-typed attention layer.

    For every relation the source rows are projected by the relation's
    weight, scored against the projected target row, softmax-normalized over
    the target's in-neighbors of that relation, summed and activated.  A
    node's output is the mean over the relation types that reach it; heads
    are concatenated.  Relations between different node types project the
    target row with a separate weight since the widths differ.

    Types listed in ``project_types`` skip message passing altogether: their
    output is a plain linear projection of their own row, with no activation.
    """

    def __init__(
        self,
        relations: dict[str, tuple[str, str]],
        in_dims: dict[str, int],
        out_dims: dict[str, int],
        heads: int,
        attention: bool = True,
        raw_types: Sequence[str] = (),
        project_types: Sequence[str] = (),
        canonical: bool = False,
        slope: float = tn.LEAKY_SLOPE,
    ) -> None:
        super().__init__()
        self.relations = dict(relations)
        self.in_dims = dict(in_dims)
        self.out_dims = dict(out_dims)
        self.heads = heads
        self.attention = attention
        self.raw_types = frozenset(raw_types)
        self.project_types = frozenset(project_types)
        self.canonical = canonical
        self.slope = slope
        self.W = nn.ParameterDict()
        self.W_dst = nn.ParameterDict()
        self.attn = nn.ParameterDict()
        self.W_self = nn.ParameterDict()
        for t in sorted(self.project_types):
            self.W_self[t] = nn.Parameter(torch.empty(out_dims[t], in_dims[t]))
        for rel, (s, d) in self.relations.items():
            if d in self.project_types:
                continue
            if out_dims[d] % heads:
                raise ValueError(f"output width {out_dims[d]} not divisible by {heads} heads")
            per = out_dims[d] // heads
            self.W[rel] = nn.Parameter(torch.empty(heads, per, in_dims[s]))
            if attention:
                if s != d:
                    self.W_dst[rel] = nn.Parameter(torch.empty(heads, per, in_dims[d]))
                self.attn[rel] = nn.Parameter(torch.empty(heads, 2 * per))

    def reset_parameters(self, generator: Optional[torch.Generator] = None) -> None:
        for rel, w in self.W.items():
            tn.glorot_(w, w.shape[2], w.shape[1], generator)
        for rel, w in self.W_dst.items():
            tn.glorot_(w, w.shape[2], w.shape[1], generator)
        for rel, a in self.attn.items():
            tn.glorot_(a, a.shape[1], 1, generator)
        for t, w in self.W_self.items():
            tn.glorot_(w, w.shape[1], w.shape[0], generator)

    def forward(
        self,
        edges: dict[str, tuple[torch.Tensor, torch.Tensor]],
        feats: dict[str, torch.Tensor],
        num_nodes: dict[str, int],
        attention_out: Optional[dict] = None,
    ) -> dict[str, torch.Tensor]:
        acc: dict[str, torch.Tensor] = {}
        hits: dict[str, torch.Tensor] = {}
        for rel, (src, dst) in edges.items():
            if rel not in self.relations:
                raise KeyError(f"layer has no parameters for relation {rel!r}")
            s, d = self.relations[rel]
            if src.numel() == 0 or d in self.project_types:
                continue
            n_dst = num_nodes[d]
            w = self.W[rel]
            wh_src = torch.einsum("ni,hoi->nho", feats[s], w)
            msg = wh_src[src]
            if self.attention:
                wh_dst = wh_src if s == d else torch.einsum("ni,hoi->nho", feats[d], self.W_dst[rel])
                pair = torch.cat([wh_dst[dst], msg], dim=-1)
                score = tn.leaky_relu((pair * self.attn[rel]).sum(-1), self.slope)
                beta = tn.segment_softmax(score, dst, n_dst, self.canonical)
            else:
                deg = torch.bincount(dst, minlength=n_dst).clamp(min=1).to(msg.dtype)
                beta = (1.0 / deg)[dst].unsqueeze(-1).expand(-1, self.heads)
            if attention_out is not None:
                attention_out[rel] = (dst, beta)
            h = tn.segment_sum(beta.unsqueeze(-1) * msg, dst, n_dst, self.canonical)
            if d not in self.raw_types:
                h = tn.leaky_relu(h, self.slope)
            reached = (torch.bincount(dst, minlength=n_dst) > 0).to(h.dtype)
            acc[d] = acc[d] + h if d in acc else h
            hits[d] = hits[d] + reached if d in hits else reached
        out = {}
        for t in self.out_dims:
            n = num_nodes.get(t, 0)
            if t in self.project_types:
                out[t] = feats[t] @ self.W_self[t].T
            elif t in acc:
                mean = acc[t] / hits[t].clamp(min=1).view(-1, 1, 1)
                out[t] = mean.reshape(n, -1)
            else:
                dtype = next(iter(feats.values())).dtype
                out[t] = torch.zeros(n, self.out_dims[t], dtype=dtype)
        return out


def _value_head(width: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(width, VALUE_HIDDEN),
        nn.LeakyReLU(tn.LEAKY_SLOPE),
        nn.Linear(VALUE_HIDDEN, VALUE_HIDDEN),
        nn.LeakyReLU(tn.LEAKY_SLOPE),
        nn.Linear(VALUE_HIDDEN, 1),
    )


class PolicyNet(nn.Module):
    """Actor-critic over interaction graphs.

    ``encdec`` is the encoder-decoder; ``hetgat`` reads depot logits straight
    off a three-layer encoder; ``hetgcn`` is ``hetgat`` with uniform
    neighbor weights and no attention parameters.
    """

    def __init__(self, arch: str = "encdec", dtype=torch.float64, seed: int = 0) -> None:
        super().__init__()
        if arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {arch!r}")
        self.arch = arch
        attention = arch != "hetgcn"
        types = (VEHICLE, DEPOT, PAYLOAD)
        dims = dict(HIG_WIDTHS)
        layers = []
        for i, (width, heads) in enumerate(ENCODER_LAYERS):
            out = {t: width for t in types}
            raw = ()
            if arch != "encdec" and i == len(ENCODER_LAYERS) - 1:
                out[DEPOT] = 1
                raw = (DEPOT,)
            layers.append(HetGATLayer(HIG_RELATIONS, dims, out, heads, attention, raw))
            dims = out
        self.encoder = nn.ModuleList(layers)
        if arch == "encdec":
            dims = {GRAPH: GRAPH_WIDTH, DEPOT: 64, VALUE: VALUE_INIT_WIDTH}
            dec = []
            for i, (width, heads) in enumerate(DECODER_LAYERS):
                out = {t: width for t in (GRAPH, DEPOT, VALUE)}
                last = (GRAPH, DEPOT) if i == len(DECODER_LAYERS) - 1 else ()
                # depot-order-independent sums keep scores exactly equivariant
                dec.append(HetGATLayer(HDG_RELATIONS, dims, out, heads, True, project_types=last, canonical=True))
                dims = out
            self.decoder = nn.ModuleList(dec)
        else:
            self.decoder = nn.ModuleList()
        self.fc_val = _value_head(64)
        self.reset_parameters(seed)
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def reset_parameters(self, seed: int = 0) -> None:
        gen = torch.Generator().manual_seed(int(seed))
        for layer in list(self.encoder) + list(self.decoder):
            layer.reset_parameters(gen)
        for m in self.fc_val:
            if isinstance(m, nn.Linear):
                tn.glorot_(m.weight, m.in_features, m.out_features, gen)
                nn.init.zeros_(m.bias)

    def encode(self, batch: GraphBatch, attention_out: Optional[list] = None):
        """Node embeddings per type and the per-graph embedding (mean per type, concatenated)."""
        h = {t: batch.features[t] for t in (VEHICLE, DEPOT, PAYLOAD)}
        for layer in self.encoder:
            rec = {} if attention_out is not None else None
            h = layer(batch.edges, h, batch.num_nodes, rec)
            if rec is not None:
                attention_out.append(rec)
        blocks = [
            tn.segment_mean(h[t], batch.graph_index[t], batch.num_graphs, canonical=(t == DEPOT))
            for t in (VEHICLE, DEPOT, PAYLOAD)
        ]
        return h, torch.cat(blocks, dim=1)

    def decode(self, g: torch.Tensor, depot_h: torch.Tensor, num_depots: int, attention_out: Optional[list] = None):
        """Depot scores (B, L) and values (B,) from the graph embedding and depot embeddings."""
        num_graphs = g.shape[0]
        dec = _decoder_batch(num_depots, num_graphs)
        x = {GRAPH: g, DEPOT: depot_h, VALUE: g.new_zeros(num_graphs, VALUE_INIT_WIDTH)}
        for layer in self.decoder:
            rec = {} if attention_out is not None else None
            x = layer(dec.edges, x, dec.num_nodes, rec)
            if rec is not None:
                attention_out.append(rec)
        q_g = x[GRAPH][dec.graph_index[DEPOT]]
        scores = tn.leaky_relu((x[DEPOT] * q_g).sum(-1)).view(num_graphs, num_depots)
        value = self.fc_val(x[VALUE]).squeeze(-1)
        return scores, value

    def forward(self, batch: GraphBatch, attention_out: Optional[list] = None):
        num_depots = batch.num_nodes[DEPOT] // batch.num_graphs
        if num_depots * batch.num_graphs != batch.num_nodes[DEPOT]:
            raise ValueError("all graphs in a batch must share the depot count")
        h, g = self.encode(batch, attention_out)
        if self.arch == "encdec":
            return self.decode(g, h[DEPOT], num_depots, attention_out)
        scores = h[DEPOT][:, 0].view(batch.num_graphs, num_depots)
        pooled = tn.segment_mean(h[VEHICLE], batch.graph_index[VEHICLE], batch.num_graphs)
        return scores, self.fc_val(pooled).squeeze(-1)

    def info(self) -> dict:
        """Relation types, parameter shapes and counts, for audit dumps."""
        shapes = {name: list(p.shape) for name, p in self.named_parameters()}
        return {
            "arch": self.arch,
            "attention": self.arch != "hetgcn",
            "encoder_relations": sorted(HIG_RELATIONS),
            "decoder_relations": sorted(HDG_RELATIONS) if self.arch == "encdec" else [],
            "attention_vectors": "per relation, per head",
            "parameters": shapes,
            "parameter_count": int(sum(p.numel() for p in self.parameters())),
        }


def masked_log_probs(scores: torch.Tensor, mask: Optional[torch.Tensor]) -> torch.Tensor:
    if mask is not None:
        scores = scores.masked_fill(mask, -math.inf)
    return torch.log_softmax(scores, dim=-1)


def entropy(log_probs: torch.Tensor) -> torch.Tensor:
    p = log_probs.exp()
    # zero the -inf entries before multiplying so their gradient stays finite
    safe = torch.where(p > 0, log_probs, torch.zeros_like(log_probs))
    return -(p * safe).sum(-1)


@dataclass
class PolicyOutput:
    probabilities: np.ndarray
    value: float
    scores: np.ndarray
    mask: np.ndarray


def policy_forward(
    world: WorldState,
    vehicle_id: int,
    model: PolicyNet,
    k_v: int,
    k_d: int,
    use_mask: bool,
) -> PolicyOutput:
    hig, mask = observation(world, vehicle_id, k_v, k_d)
    if not use_mask:
        mask = np.zeros_like(mask)
    batch = batch_graphs([hig], model.dtype)
    with torch.no_grad():
        scores, value = model(batch)
        logp = masked_log_probs(scores, torch.from_numpy(mask).unsqueeze(0))
    return PolicyOutput(
        probabilities=logp.exp()[0].numpy().astype(float),
        value=float(value[0]),
        scores=scores[0].numpy().astype(float),
        mask=mask,
    )


def sample_index(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw; zero-probability entries are never returned."""
    cdf = np.cumsum(probs)
    u = rng.random() * cdf[-1]
    idx = min(int(np.searchsorted(cdf, u, side="right")), len(probs) - 1)
    while probs[idx] == 0:
        idx -= 1
    return idx


class LearnedPolicy:
    """Shared-parameter decision function over a batch of deciding vehicles."""

    def __init__(self, model: PolicyNet, k_v: int, k_d: int, use_mask: bool, greedy: bool = False) -> None:
        self.model = model
        self.k_v = k_v
        self.k_d = k_d
        self.use_mask = use_mask
        self.greedy = greedy

    def observe(self, world: WorldState, vehicle_ids: Sequence[int]):
        graphs, masks = [], []
        k_v = min(self.k_v, len(world.vehicles))
        k_d = min(self.k_d, len(world.depots))
        for vid in vehicle_ids:
            hig, mask = observation(world, vid, k_v, k_d)
            graphs.append(hig)
            masks.append(mask if self.use_mask else np.zeros_like(mask))
        return graphs, np.stack(masks)

    def evaluate(self, graphs: Sequence[HeteroGraph], masks: np.ndarray):
        batch = batch_graphs(graphs, self.model.dtype)
        with torch.no_grad():
            scores, values = self.model(batch)
            logp = masked_log_probs(scores, torch.from_numpy(masks))
        return logp.double().numpy(), values.double().numpy()

    def choose(self, logp: np.ndarray, rng: np.random.Generator) -> list[int]:
        out = []
        for row in logp:
            probs = np.exp(row)
            out.append(int(np.argmax(row)) if self.greedy else sample_index(probs, rng))
        return out

    def act(self, world: WorldState, vehicle_ids: list[int], rng: np.random.Generator) -> list[int]:
        graphs, masks = self.observe(world, vehicle_ids)
        logp, _ = self.evaluate(graphs, masks)
        return self.choose(logp, rng)
