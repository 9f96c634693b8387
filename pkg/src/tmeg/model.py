"""Graph-biased multi-head attention encoder and reasoning head.

The encoder sums content/position/segment embeddings per node, projects
each modality through a Tanh MLP, then applies stacked fusion layers whose
attention logits carry learnable per-layer, per-head scalar biases indexed
by the temporal and modal edge-code matrices. The reasoning head extracts
per-unit CLS rows, applies an InfoNCE-style coherence loss between aligned
text/image representations, and ranks candidates with a small plain
transformer scorer.

Structurally identical graphs are processed as a stacked batch (leading
batch axis) for speed; the public single-graph operations wrap a batch of
one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .autodiff import Tensor, concat, layer_norm, linear, logsumexp, softmax
from .graph import TmegGraph, N_MODAL_CODES, N_TEMPORAL_CODES
from .optim import ParamStore, config_hash


@dataclass
class ModelConfig:
    d_model: int = 128
    n_heads: int = 8
    n_layers: int = 4
    ffn_multiplier: int = 4
    scorer_layers: int = 2
    scorer_d: int | None = None  # None -> d_model; 512 mirrors the full-size preset
    scorer_heads: int = 8
    tau: float = 0.07
    k_negatives: int = 8
    lambda_b: float = 0.1
    token_vocab_size: int = 64
    d_v: int = 8
    max_steps: int = 16
    max_positions: int = 256
    # Weight/embedding init scale. Candidate graphs differ in few nodes, so
    # a very small scale leaves candidate scores nearly indistinguishable
    # and the ranking loss on a plateau.
    init_scale: float = 0.02
    # Init scale for the edge-code bias tables only. These scalars are added
    # directly to attention logits, so an O(1) start makes graph structure
    # visible to the forward pass from the first step; tiny inits leave the
    # edge codes drowned out by content logits for many epochs.
    edge_bias_init_scale: float = 1.0
    # Inclusive InfoNCE denominator (positive + negatives). The literal
    # negatives-only variant is available for comparison.
    coherence_inclusive: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        sd = self.scorer_d if self.scorer_d is not None else self.d_model
        if sd % self.scorer_heads != 0:
            raise ValueError("scorer_d must be divisible by scorer_heads")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.lambda_b < 0:
            raise ValueError("lambda_b must be >= 0")

    @property
    def scorer_dim(self) -> int:
        return self.scorer_d if self.scorer_d is not None else self.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def full_size_config(**overrides) -> ModelConfig:
    """Preset mirroring the reported scorer width (512, 2 layers, 8 heads)."""
    kw = dict(scorer_d=512, scorer_layers=2, scorer_heads=8)
    kw.update(overrides)
    return ModelConfig(**kw)


# ----------------------------------------------------------------------
# parameters


def init_params(config: ModelConfig, seed: int = 0,
                init_scale: float | None = None) -> ParamStore:
    """Normal(0, init_scale) weights, embeddings, and edge-bias scalars;
    zero additive biases; layer-norm gains at 1.

    Attention layers carry no key bias (it cancels exactly under the
    per-column softmax) and the scorer head has no final bias (a shared
    score shift cancels in the candidate cross-entropy).
    """
    if init_scale is None:
        init_scale = config.init_scale
    rng = np.random.default_rng(seed)
    store = ParamStore()
    d = config.d_model
    sd = config.scorer_dim

    def w(name, *shape):
        store.add(name, rng.normal(0.0, init_scale, size=shape))

    def z(name, *shape):
        store.add(name, np.zeros(shape))

    def ones(name, *shape):
        store.add(name, np.ones(shape))

    # embeddings: two extra content rows for the text CLS / SEP specials
    w("emb/token_content", config.token_vocab_size + 2, d)
    w("emb/text_position", config.max_positions, d)
    w("emb/segment", config.max_steps + 1, d)
    w("emb/vis_proj_w", config.d_v, d)
    z("emb/vis_proj_b", d)
    w("emb/box_proj_w", 6, d)
    z("emb/box_proj_b", d)
    w("emb/vis_cls", d)

    for mod in ("mlp_text", "mlp_vis"):
        w(f"{mod}/w1", d, d)
        z(f"{mod}/b1", d)
        w(f"{mod}/w2", d, d)
        z(f"{mod}/b2", d)

    # random (not zero) start: with zero tables the edge codes are invisible
    # to the forward pass and their gradient is dwarfed by content gradients
    bs = config.edge_bias_init_scale
    store.add("bias_t", rng.normal(
        0.0, bs, size=(config.n_layers, config.n_heads, N_TEMPORAL_CODES)))
    store.add("bias_m", rng.normal(
        0.0, bs, size=(config.n_layers, config.n_heads, N_MODAL_CODES)))

    def transformer_layer(prefix, dim, mult):
        w(f"{prefix}/wq", dim, dim)
        z(f"{prefix}/bq", dim)
        w(f"{prefix}/wk", dim, dim)
        w(f"{prefix}/wv", dim, dim)
        z(f"{prefix}/bv", dim)
        w(f"{prefix}/wo", dim, dim)
        z(f"{prefix}/bo", dim)
        ones(f"{prefix}/ln1_g", dim)
        z(f"{prefix}/ln1_b", dim)
        w(f"{prefix}/ffn_w1", dim, mult * dim)
        z(f"{prefix}/ffn_b1", mult * dim)
        w(f"{prefix}/ffn_w2", mult * dim, dim)
        z(f"{prefix}/ffn_b2", dim)
        ones(f"{prefix}/ln2_g", dim)
        z(f"{prefix}/ln2_b", dim)

    for l in range(config.n_layers):
        transformer_layer(f"enc{l}", d, config.ffn_multiplier)

    w("scorer/cls", sd)
    w("scorer/sep", sd)
    if sd != d:
        w("scorer/in_w", d, sd)
        z("scorer/in_b", sd)
    for l in range(config.scorer_layers):
        transformer_layer(f"sc{l}", sd, config.ffn_multiplier)
    w("scorer/out_w1", sd, sd)
    z("scorer/out_b1", sd)
    w("scorer/out_w2", sd, 1)
    return store


# ----------------------------------------------------------------------
# batched graph preparation


@dataclass
class GraphBatch:
    """Stacked arrays for structurally identical graphs."""
    size: int
    n_nodes: int
    n_text: int
    token_ids: np.ndarray      # (B, n_text) into the extended token table
    text_positions: np.ndarray  # (n_text,)
    text_segments: np.ndarray   # (n_text,)
    vis_features: np.ndarray    # (B, n_vis, d_v); zero rows at CLS positions
    vis_boxes: np.ndarray       # (B, n_vis, 6); zero rows at CLS positions
    vis_segments: np.ndarray    # (n_vis,)
    vis_cls_mask: np.ndarray    # (n_vis,) 1.0 at visual CLS rows
    phi_t: np.ndarray           # (B, N, N)
    phi_m: np.ndarray           # (B, N, N)
    text_cls_idx: np.ndarray    # (N_t,) global indices
    vis_cls_idx: np.ndarray     # (N_a,) global indices

    @property
    def n_vis(self) -> int:
        return self.n_nodes - self.n_text


def _structure_signature(graph: TmegGraph) -> tuple:
    return tuple((n.modality, n.kind, n.step_index) for n in graph.nodes)


def prepare_batch(graphs: list[TmegGraph], vocab: dict[str, int],
                  config: ModelConfig) -> GraphBatch:
    if not graphs:
        raise ValueError("empty graph batch")
    sig = _structure_signature(graphs[0])
    for g in graphs[1:]:
        if _structure_signature(g) != sig:
            raise ValueError("graphs in a batch must be structurally identical")
    g0 = graphs[0]
    nodes = g0.nodes
    n_text = sum(1 for n in nodes if n.modality == "text")
    text_nodes = nodes[:n_text]
    vis_nodes = nodes[n_text:]
    if any(n.modality != "text" for n in text_nodes) or any(
            n.modality != "visual" for n in vis_nodes):
        raise ValueError("expected contiguous text-then-visual node layout")

    cls_id = config.token_vocab_size
    sep_id = config.token_vocab_size + 1
    if n_text > config.max_positions:
        raise ValueError(
            f"{n_text} text nodes exceed max_positions={config.max_positions}")

    def token_row(node) -> int:
        if node.kind == "cls":
            return cls_id
        if node.kind == "sep":
            return sep_id
        return vocab.get(node.token, 0)

    B = len(graphs)
    token_ids = np.zeros((B, n_text), dtype=np.int64)
    for b, g in enumerate(graphs):
        token_ids[b] = [token_row(n) for n in g.nodes[:n_text]]
    text_positions = np.arange(n_text, dtype=np.int64)
    text_segments = np.array([n.step_index for n in text_nodes], dtype=np.int64)
    if text_segments.size and text_segments.max() > config.max_steps:
        raise ValueError("step index exceeds max_steps")

    n_vis = len(vis_nodes)
    vis_features = np.zeros((B, n_vis, config.d_v))
    vis_boxes = np.zeros((B, n_vis, 6))
    for b, g in enumerate(graphs):
        for k, node in enumerate(g.nodes[n_text:]):
            if node.kind == "object":
                if node.obj.feature.shape != (config.d_v,):
                    raise ValueError("object feature dimension mismatch")
                vis_features[b, k] = node.obj.feature
                box = node.obj.box
                vis_boxes[b, k] = [box.x1, box.y1, box.x2, box.y2,
                                   box.x2 - box.x1, box.y2 - box.y1]
    vis_segments = np.array([n.step_index for n in vis_nodes], dtype=np.int64)
    vis_cls_mask = np.array(
        [1.0 if n.kind == "cls" else 0.0 for n in vis_nodes])

    phi_t = np.stack([g.phi_t.astype(np.int64) for g in graphs])
    phi_m = np.stack([g.phi_m.astype(np.int64) for g in graphs])
    text_cls_idx = np.array(g0.cls_indices("text"), dtype=np.int64)
    vis_cls_idx = np.array(g0.cls_indices("visual"), dtype=np.int64)
    return GraphBatch(
        size=B, n_nodes=len(nodes), n_text=n_text,
        token_ids=token_ids, text_positions=text_positions,
        text_segments=text_segments, vis_features=vis_features,
        vis_boxes=vis_boxes, vis_segments=vis_segments,
        vis_cls_mask=vis_cls_mask, phi_t=phi_t, phi_m=phi_m,
        text_cls_idx=text_cls_idx, vis_cls_idx=vis_cls_idx,
    )


# ----------------------------------------------------------------------
# model


class TmegModel:
    def __init__(self, config: ModelConfig, vocab: dict[str, int],
                 store: ParamStore | None = None, seed: int = 0):
        if len(vocab) > config.token_vocab_size:
            raise ValueError(
                f"vocab of {len(vocab)} exceeds token_vocab_size="
                f"{config.token_vocab_size}")
        self.config = config
        self.vocab = vocab
        self.store = store if store is not None else init_params(config, seed)

    def p(self, name: str) -> Tensor:
        return self.store[name].tensor

    # ------------------------------------------------------------------
    # encoding

    def encode_nodes(self, batch: GraphBatch) -> Tensor:
        """Initial hidden states H0: content + position/box + segment sums."""
        seg = self.p("emb/segment")
        h_text = (self.p("emb/token_content")[batch.token_ids]
                  + self.p("emb/text_position")[batch.text_positions]
                  + seg[batch.text_segments])
        if batch.n_vis == 0:
            return h_text
        obj_mask = Tensor((1.0 - batch.vis_cls_mask)[:, None])
        cls_mask = Tensor(batch.vis_cls_mask[:, None])
        h_obj = linear(Tensor(batch.vis_features),
                       self.p("emb/vis_proj_w"), self.p("emb/vis_proj_b"))
        h_vis = (h_obj * obj_mask
                 + self.p("emb/vis_cls") * cls_mask
                 + linear(Tensor(batch.vis_boxes),
                          self.p("emb/box_proj_w"), self.p("emb/box_proj_b"))
                 + seg[batch.vis_segments])
        return concat([h_text, h_vis], axis=1)

    def project_modalities(self, h0: Tensor, batch: GraphBatch) -> Tensor:
        def mlp(x, prefix):
            hidden = linear(x, self.p(f"{prefix}/w1"), self.p(f"{prefix}/b1")).tanh()
            return linear(hidden, self.p(f"{prefix}/w2"), self.p(f"{prefix}/b2"))

        nt = batch.n_text
        h_text = mlp(h0[:, :nt], "mlp_text")
        if batch.n_vis == 0:
            return h_text
        h_vis = mlp(h0[:, nt:], "mlp_vis")
        return concat([h_text, h_vis], axis=1)

    # ------------------------------------------------------------------
    # attention

    def _edge_bias(self, layer: int, head: int, phi_t, phi_m,
                   zero_t: bool, zero_m: bool) -> Tensor | None:
        """Sum of temporal and modal scalar biases for one layer/head.

        NONE codes always read exactly 0 (masked, not learnable)."""
        total = None
        for table_name, phi, off in (("bias_t", phi_t, zero_t),
                                     ("bias_m", phi_m, zero_m)):
            if off:
                continue
            vals = self.p(table_name)[(layer, head)][phi] * Tensor(
                (phi != 0).astype(np.float64))
            total = vals if total is None else total + vals
        return total

    def _transformer_layer(self, h: Tensor, prefix: str, n_heads: int,
                           bias_fn=None) -> Tensor:
        dim = h.shape[-1]
        dh = dim // n_heads
        q = linear(h, self.p(f"{prefix}/wq"), self.p(f"{prefix}/bq"))
        k = linear(h, self.p(f"{prefix}/wk"))
        v = linear(h, self.p(f"{prefix}/wv"), self.p(f"{prefix}/bv"))
        heads = []
        for hd in range(n_heads):
            sl = (Ellipsis, slice(hd * dh, (hd + 1) * dh))
            qh, kh, vh = q[sl], k[sl], v[sl]
            # logits[..., i, j] = k_i . q_j / sqrt(d_head) (+ biases)
            logits = (kh @ qh.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
            if bias_fn is not None:
                bias = bias_fn(hd)
                if bias is not None:
                    logits = logits + bias
            attn = softmax(logits, axis=-2)  # normalize over i for each j
            heads.append(attn.swapaxes(-1, -2) @ vh)
        merged = concat(heads, axis=-1)
        out = linear(merged, self.p(f"{prefix}/wo"), self.p(f"{prefix}/bo"))
        h1 = layer_norm(out + h, self.p(f"{prefix}/ln1_g"), self.p(f"{prefix}/ln1_b"))
        ffn = linear(
            linear(h1, self.p(f"{prefix}/ffn_w1"), self.p(f"{prefix}/ffn_b1")).gelu(),
            self.p(f"{prefix}/ffn_w2"), self.p(f"{prefix}/ffn_b2"))
        return layer_norm(ffn + h1, self.p(f"{prefix}/ln2_g"),
                          self.p(f"{prefix}/ln2_b"))

    def fusion_layer(self, h: Tensor, phi_t: np.ndarray, phi_m: np.ndarray,
                     layer: int, zero_t: bool = False,
                     zero_m: bool = False) -> Tensor:
        return self._transformer_layer(
            h, f"enc{layer}", self.config.n_heads,
            bias_fn=lambda hd: self._edge_bias(layer, hd, phi_t, phi_m,
                                               zero_t, zero_m))

    def fusion_stack(self, h: Tensor, phi_t: np.ndarray, phi_m: np.ndarray,
                     zero_t: bool = False, zero_m: bool = False) -> Tensor:
        for l in range(self.config.n_layers):
            h = self.fusion_layer(h, phi_t, phi_m, l, zero_t, zero_m)
        return h

    def run_encoder_batch(self, batch: GraphBatch, zero_t: bool = False,
                          zero_m: bool = False) -> Tensor:
        h = self.encode_nodes(batch)
        h = self.project_modalities(h, batch)
        return self.fusion_stack(h, batch.phi_t, batch.phi_m, zero_t, zero_m)

    def run_encoder(self, graph: TmegGraph, zero_t: bool = False,
                    zero_m: bool = False) -> Tensor:
        batch = prepare_batch([graph], self.vocab, self.config)
        out = self.run_encoder_batch(batch, zero_t, zero_m)
        return out[0]

    def attention_logits(self, q_head: Tensor, k_head: Tensor,
                         phi_t: np.ndarray, phi_m: np.ndarray,
                         layer: int, head: int) -> Tensor:
        """Column-softmax logits for one head: e[i][j] = q_j.k_i/sqrt(d) + biases."""
        dh = q_head.shape[-1]
        logits = (k_head @ q_head.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
        bias = self._edge_bias(layer, head, phi_t, phi_m, False, False)
        if bias is not None:
            logits = logits + bias
        return logits

    # ------------------------------------------------------------------
    # reasoning head

    def extract_cls(self, h: Tensor, batch: GraphBatch) -> tuple[Tensor, Tensor]:
        """Per-unit CLS rows: (B, N_t, d) text and (B, N_a, d) visual."""
        ht = h[:, batch.text_cls_idx]
        hv = h[:, batch.vis_cls_idx]
        return ht, hv

    def assemble_pair(self, ht: Tensor, hv: Tensor) -> Tensor:
        """[CLS, text rows..., SEP, visual rows...] in scorer space."""
        cfg = self.config
        if cfg.scorer_dim != cfg.d_model:
            ht = linear(ht, self.p("scorer/in_w"), self.p("scorer/in_b"))
            hv = linear(hv, self.p("scorer/in_w"), self.p("scorer/in_b"))
        B = ht.shape[0]
        zeros = Tensor(np.zeros((B, 1, cfg.scorer_dim)))
        cls_row = zeros + self.p("scorer/cls")
        sep_row = zeros + self.p("scorer/sep")
        return concat([cls_row, ht, sep_row, hv], axis=1)

    def score_candidate(self, pair_seq: Tensor) -> Tensor:
        """Plain transformer over the pair sequence; scalar per batch row.

        The readout is a one-hidden-layer fully connected head on the
        leading CLS row. Its final map carries no bias, so no parameter
        direction shifts all candidate scores by the same constant."""
        h = pair_seq
        for l in range(self.config.scorer_layers):
            h = self._transformer_layer(h, f"sc{l}", self.config.scorer_heads)
        lead = h[:, 0]
        hidden = linear(lead, self.p("scorer/out_w1"),
                        self.p("scorer/out_b1")).tanh()
        return linear(hidden, self.p("scorer/out_w2"))[:, 0]

    def score_graphs(self, graphs: list[TmegGraph], zero_t=False,
                     zero_m=False) -> Tensor:
        """Scores for a list of structurally identical graphs, shape (B,)."""
        batch = prepare_batch(graphs, self.vocab, self.config)
        h = self.run_encoder_batch(batch, zero_t, zero_m)
        ht, hv = self.extract_cls(h, batch)
        return self.score_candidate(self.assemble_pair(ht, hv))


# ----------------------------------------------------------------------
# losses


def _normalize_rows(x: Tensor, eps_check: bool = True) -> Tensor:
    norms = (x * x).sum(axis=-1, keepdims=True).sqrt()
    if eps_check and (norms.data == 0).any():
        raise ValueError("cosine similarity undefined for zero-norm vector")
    return x / norms


def coherence_loss(ht: Tensor, hv_pos: Tensor, negatives: Tensor,
                   tau: float, inclusive: bool = True) -> Tensor:
    """InfoNCE-style alignment loss averaged over aligned steps.

    ht, hv_pos: (n, d) aligned text/image representations; negatives: (K, d).
    With `inclusive` the positive appears in the denominator, which bounds
    the loss below by 0; the literal negatives-only variant is kept for
    comparison.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    if negatives.shape[0] < 1:
        raise ValueError("need at least one negative")
    t_hat = _normalize_rows(ht)
    v_hat = _normalize_rows(hv_pos)
    n_hat = _normalize_rows(negatives)
    pos_sim = (t_hat * v_hat).sum(axis=-1, keepdims=True)  # (n, 1)
    neg_sims = t_hat @ n_hat.swapaxes(-1, -2)              # (n, K)
    pos_logit = pos_sim * (1.0 / tau)
    neg_logits = neg_sims * (1.0 / tau)
    if inclusive:
        denom = logsumexp(concat([pos_logit, neg_logits], axis=-1),
                          axis=-1, keepdims=True)
    else:
        denom = logsumexp(neg_logits, axis=-1, keepdims=True)
    return (denom - pos_logit).mean()


def prediction_loss(scores: Tensor, gold: int) -> Tensor:
    """Softmax cross-entropy over all candidate scores."""
    n = scores.shape[-1]
    if n < 2:
        raise ValueError("need at least 2 candidates")
    if not (0 <= gold < n):
        raise ValueError("gold index out of range")
    return logsumexp(scores, axis=-1) - scores[gold]


def prediction_loss_batch(scores: Tensor, gold: np.ndarray) -> Tensor:
    """Mean cross-entropy for (B, N_c) score rows with per-row gold indices."""
    lse = logsumexp(scores, axis=-1)                       # (B,)
    rows = np.arange(scores.shape[0])
    return (lse - scores[(rows, np.asarray(gold))]).mean()


def total_loss(pred: Tensor, coh: Tensor | None, lambda_b: float) -> Tensor:
    if coh is None or lambda_b == 0:
        return pred
    return pred + lambda_b * coh
