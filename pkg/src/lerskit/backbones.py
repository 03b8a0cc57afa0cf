"""The four base recommenders, each parameterized over any embedding layer.

Collaborative filtering: a latent-factor model with paired GMF/DNN branches,
and a propagation-based graph model with an optional contrastive term.
Click-through prediction: a factorization machine with a deep branch, and a
mixture-of-low-rank-experts cross network with a stacked head.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor
from .data import InteractionSet
from .embeddings import EmbeddingLayer
from .nn import Linear, Mlp, l2_penalty

EPS = 1e-7


# ---------------------------------------------------------------------------
# latent-factor CF model (GMF + DNN branches)
# ---------------------------------------------------------------------------

class NeuMF:
    def __init__(self, gmf_user: EmbeddingLayer, gmf_item: EmbeddingLayer,
                 dnn_user: EmbeddingLayer, dnn_item: EmbeddingLayer,
                 rng: np.random.Generator, hidden: list[int] | None = None,
                 dropout: float = 0.0):
        if gmf_user is dnn_user or gmf_item is dnn_item:
            raise ValueError("GMF and DNN branches require distinct embedding layers")
        d = gmf_user.spec.d
        self.gmf_user, self.gmf_item = gmf_user, gmf_item
        self.dnn_user, self.dnn_item = dnn_user, dnn_item
        self.h = Tensor(rng.normal(0.0, 0.1, size=(d,)), requires_grad=True, name="gmf.h")
        self.mlp = Mlp(2 * d, hidden if hidden is not None else [64, 32, 16], 1,
                       rng, name="neumf.mlp", dropout=dropout)
        self.rng = rng

    def embedding_layers(self) -> list[EmbeddingLayer]:
        return [self.gmf_user, self.gmf_item, self.dnn_user, self.dnn_item]

    def params(self) -> list[Tensor]:
        out: list[Tensor] = []
        for layer in self.embedding_layers():
            out.extend(layer.params())
        out.append(self.h)
        out.extend(self.mlp.params())
        return out

    def score(self, users, items, training: bool = False) -> Tensor:
        """sigma(h^T (e_u ⊙ e_v) + DNN([e_u; e_v])) per (user, item) pair."""
        gu = self.gmf_user.lookup(users)
        gv = self.gmf_item.lookup(items)
        gmf = ad.matmul(ad.mul(gu, gv), ad.reshape(self.h, (-1, 1)))
        du = self.dnn_user.lookup(users)
        dv = self.dnn_item.lookup(items)
        dnn = self.mlp(ad.concat([du, dv], axis=1), rng=self.rng, training=training)
        return ad.sigmoid(ad.reshape(ad.add(gmf, dnn), (-1,)))

    def loss(self, users, pos_items, neg_items, lam: float, training: bool = True) -> Tensor:
        """Summed negative log-likelihood over the positives and all sampled
        negatives, plus lam * ||Theta||^2. Probabilities are clipped to
        [EPS, 1-EPS] before the logarithm."""
        users = np.asarray(users, dtype=np.int64)
        neg_items = np.asarray(neg_items, dtype=np.int64)
        if neg_items.ndim != 2 or neg_items.shape[1] < 1:
            raise ValueError("need at least one sampled negative per positive")
        r_pos = ad.clip(self.score(users, pos_items, training), EPS, 1.0 - EPS)
        n_neg = neg_items.shape[1]
        rep_users = np.repeat(users, n_neg)
        r_neg = ad.clip(self.score(rep_users, neg_items.reshape(-1), training), EPS, 1.0 - EPS)
        nll = ad.sub(ad.constant(0.0),
                     ad.add(ad.tsum(ad.log(r_pos)),
                            ad.tsum(ad.log(ad.sub(1.0, r_neg)))))
        return ad.add(nll, l2_penalty(self.params(), lam))

    def score_rows(self, users: np.ndarray, n_items: int, chunk: int = 16) -> np.ndarray:
        out = np.empty((users.size, n_items))
        items = np.arange(n_items, dtype=np.int64)
        for lo in range(0, users.size, chunk):
            batch = users[lo:lo + chunk]
            rep_u = np.repeat(batch, n_items)
            rep_v = np.tile(items, batch.size)
            out[lo:lo + chunk] = self.score(rep_u, rep_v).data.reshape(batch.size, n_items)
        return out

    def dense_params(self) -> list[Tensor]:
        return [self.h] + self.mlp.params()


# ---------------------------------------------------------------------------
# graph CF model
# ---------------------------------------------------------------------------

def build_normalized_adjacency(train: InteractionSet) -> sp.csr_matrix:
    """Symmetric (|N(u)|*|N(z)|)^(-1/2)-weighted adjacency over the joint
    user+item node space, built from the training split only."""
    n = train.user_count + train.item_count
    rows = train.pairs[:, 0]
    cols = train.pairs[:, 1] + train.user_count
    deg = np.zeros(n)
    np.add.at(deg, rows, 1.0)
    np.add.at(deg, cols, 1.0)
    with np.errstate(divide="ignore"):
        inv_sqrt = 1.0 / np.sqrt(deg)
    inv_sqrt[~np.isfinite(inv_sqrt)] = 0.0
    weights = inv_sqrt[rows] * inv_sqrt[cols]
    adj = sp.coo_matrix(
        (np.concatenate([weights, weights]),
         (np.concatenate([rows, cols]), np.concatenate([cols, rows]))),
        shape=(n, n))
    return adj.tocsr()


class LightGCN:
    def __init__(self, embedding: EmbeddingLayer, adjacency: sp.csr_matrix,
                 n_users: int, n_items: int, n_layers: int = 2,
                 gamma: float = 0.0, tau: float = 0.2):
        if n_layers < 1:
            raise ValueError("propagation depth must be >= 1")
        if tau <= 0:
            raise ValueError("temperature must be positive")
        if embedding.spec.n != n_users + n_items:
            raise ValueError("embedding must cover users + items")
        self.embedding = embedding
        self.adjacency = adjacency
        self.n_users = n_users
        self.n_items = n_items
        self.n_layers = n_layers
        self.gamma = gamma
        self.tau = tau

    def params(self) -> list[Tensor]:
        return self.embedding.params()

    def propagate(self) -> Tensor:
        """Average of the layer-0 table and its n_layers propagations."""
        x = self.embedding.lookup_all()
        acc = x
        for _ in range(self.n_layers):
            x = ad.spmm(self.adjacency, x, adj_t=self.adjacency)  # symmetric
            acc = ad.add(acc, x)
        return ad.mul(acc, 1.0 / (self.n_layers + 1))

    def final_embeddings(self) -> np.ndarray:
        return self.propagate().data

    def _info_nce(self, finals: Tensor, nodes: np.ndarray) -> Tensor:
        f = ad.gather_rows(finals, nodes)
        norm = ad.power(ad.add(ad.tsum(ad.mul(f, f), axis=1, keepdims=True), 1e-12), -0.5)
        fn = ad.mul(f, norm)
        sim = ad.mul(ad.matmul(fn, ad.transpose(fn)), 1.0 / self.tau)
        shift = float(sim.data.max())  # constant shift keeps exp in range
        lse = ad.add(ad.log(ad.tsum(ad.exp(ad.sub(sim, shift)), axis=1)), shift)
        return ad.tsum(ad.sub(lse, 1.0 / self.tau))

    def loss(self, users, pos_items, neg_items, lam: float) -> Tensor:
        """Pairwise ranking loss + lam * ||E||^2 + gamma * contrastive term
        over the distinct users/items of the batch (self-similarity fixed at
        exp(1/tau) by normalizing embeddings first)."""
        users = np.asarray(users, dtype=np.int64)
        pos = np.asarray(pos_items, dtype=np.int64) + self.n_users
        neg = np.asarray(neg_items, dtype=np.int64).reshape(-1) + self.n_users
        finals = self.propagate()
        fu = ad.gather_rows(finals, users)
        fp = ad.gather_rows(finals, pos)
        fn_ = ad.gather_rows(finals, neg)
        margin = ad.sub(ad.dot_rows(fu, fp), ad.dot_rows(fu, fn_))
        loss = ad.tsum(ad.softplus(ad.neg(margin)))  # -ln sigmoid(x) = softplus(-x)
        loss = ad.add(loss, l2_penalty(self.params(), lam))
        if self.gamma > 0.0:
            nodes = np.unique(np.concatenate([users, pos, neg]))
            loss = ad.add(loss, ad.mul(self._info_nce(finals, nodes), self.gamma))
        return loss

    def score_rows(self, users: np.ndarray) -> np.ndarray:
        finals = self.final_embeddings()
        u = finals[: self.n_users][users]
        v = finals[self.n_users:]
        return u @ v.T

    def dense_params(self) -> list[Tensor]:
        return []


# ---------------------------------------------------------------------------
# factorization machine with a deep branch
# ---------------------------------------------------------------------------

def fm_pair_interaction(field_emb: Tensor) -> Tensor:
    """Sum of pairwise dot products via the O(n*d) identity
    0.5 * ((sum_i e_i)^2 - sum_i e_i^2), summed over dimensions."""
    summed = ad.tsum(field_emb, axis=1)
    squared = ad.tsum(ad.mul(field_emb, field_emb), axis=1)
    return ad.mul(ad.tsum(ad.sub(ad.mul(summed, summed), squared), axis=1), 0.5)


class DeepFM:
    def __init__(self, embedding: EmbeddingLayer, n_fields: int,
                 rng: np.random.Generator, hidden: list[int] | None = None,
                 dropout: float = 0.0, use_dnn: bool = True):
        self.embedding = embedding
        self.n_fields = n_fields
        self.w0 = Tensor(np.zeros(()), requires_grad=True, name="fm.w0")
        self.w = Tensor(np.zeros(embedding.spec.n), requires_grad=True, name="fm.w")
        self.use_dnn = use_dnn
        d = embedding.spec.d
        self.mlp = Mlp(n_fields * d, hidden if hidden is not None else [400, 400, 400], 1,
                       rng, name="deepfm.mlp", dropout=dropout) if use_dnn else None
        self.rng = rng

    def params(self) -> list[Tensor]:
        out = list(self.embedding.params()) + [self.w0, self.w]
        if self.mlp is not None:
            out.extend(self.mlp.params())
        return out

    def _field_embeddings(self, ids: np.ndarray) -> Tensor:
        flat = self.embedding.lookup(ids.reshape(-1))
        return ad.reshape(flat, (ids.shape[0], self.n_fields, self.embedding.spec.d))

    def fm_logit(self, ids: np.ndarray) -> Tensor:
        """Pre-sigmoid second-order score (one active feature per field)."""
        ids = np.asarray(ids, dtype=np.int64)
        linear = ad.add(ad.tsum(ad.reshape(ad.gather_rows(self.w, ids.reshape(-1)),
                                           ids.shape), axis=1), self.w0)
        return ad.add(linear, fm_pair_interaction(self._field_embeddings(ids)))

    def predict(self, ids: np.ndarray, training: bool = False) -> Tensor:
        logit = self.fm_logit(ids)
        if self.mlp is not None:
            flat = ad.reshape(self._field_embeddings(ids),
                              (ids.shape[0], self.n_fields * self.embedding.spec.d))
            dnn = ad.reshape(self.mlp(flat, rng=self.rng, training=training), (-1,))
            logit = ad.add(logit, dnn)
        return ad.sigmoid(logit)

    def loss(self, ids, labels, lam: float, training: bool = True) -> Tensor:
        return ctr_loss(self.predict(ids, training), labels, self.params(), lam)

    def dense_params(self) -> list[Tensor]:
        return [self.w0, self.w] + (self.mlp.params() if self.mlp else [])


def ctr_loss(probs: Tensor, labels, params: list[Tensor], lam: float) -> Tensor:
    """Batch-averaged log loss plus lam * ||Theta||^2; probabilities clipped
    to [EPS, 1-EPS] first."""
    y = np.asarray(labels, dtype=np.float64)
    p = ad.clip(probs, EPS, 1.0 - EPS)
    nll = ad.sub(ad.constant(0.0),
                 ad.add(ad.mul(ad.log(p), y), ad.mul(ad.log(ad.sub(1.0, p)), 1.0 - y)))
    return ad.add(ad.tmean(nll), l2_penalty(params, lam))


# ---------------------------------------------------------------------------
# mixture-of-low-rank-experts cross network
# ---------------------------------------------------------------------------

class CrossLayer:
    def __init__(self, f: int, r: int, k: int, rng: np.random.Generator, name: str):
        if r >= f:
            raise ValueError("expert rank must stay below the pooled width")
        self.k = k
        s = 1.0 / np.sqrt(f)
        self.u = [Tensor(rng.normal(0, s, size=(f, r)), requires_grad=True,
                         name=f"{name}.u{i}") for i in range(k)]
        self.v = [Tensor(rng.normal(0, s, size=(f, r)), requires_grad=True,
                         name=f"{name}.v{i}") for i in range(k)]
        self.c = [Tensor(rng.normal(0, 1.0 / np.sqrt(r), size=(r, r)), requires_grad=True,
                         name=f"{name}.c{i}") for i in range(k)]
        self.gate = [Tensor(rng.normal(0, s, size=(f, 1)), requires_grad=True,
                            name=f"{name}.g{i}") for i in range(k)]
        self.bias = Tensor(np.zeros(f), requires_grad=True, name=f"{name}.b")

    def params(self) -> list[Tensor]:
        return [*self.u, *self.v, *self.c, *self.gate, self.bias]

    def __call__(self, e_l: Tensor, e_0: Tensor) -> Tensor:
        """Mixture of low-rank experts with residual:
        e_{l+1} = sum_i (W_i e_l) * (e_0 ⊙ (U_i tanh(C_i tanh(V_i^T e_l)) + b)) + e_l."""
        out = e_l
        for i in range(self.k):
            low = ad.tanh(ad.matmul(e_l, self.v[i]))            # (B, r)
            mid = ad.tanh(ad.matmul(low, ad.transpose(self.c[i])))
            up = ad.add(ad.matmul(mid, ad.transpose(self.u[i])), self.bias)
            expert = ad.mul(e_0, up)
            gate = ad.matmul(e_l, self.gate[i])                 # (B, 1) linear gate
            out = ad.add(out, ad.mul(expert, gate))
        return out


class DcnMix:
    def __init__(self, embedding: EmbeddingLayer, n_fields: int,
                 rng: np.random.Generator, n_cross: int = 3, rank: int = 64,
                 n_experts: int = 4, hidden: list[int] | None = None,
                 dropout: float = 0.0):
        self.embedding = embedding
        self.n_fields = n_fields
        f = n_fields * embedding.spec.d
        self.cross = [CrossLayer(f, rank, n_experts, rng, name=f"cross.{l}")
                      for l in range(n_cross)]
        self.mlp = Mlp(f, hidden if hidden is not None else [512, 512], 1,
                       rng, name="dcn.mlp", dropout=dropout)
        self.rng = rng

    def params(self) -> list[Tensor]:
        out = list(self.embedding.params())
        for layer in self.cross:
            out.extend(layer.params())
        out.extend(self.mlp.params())
        return out

    def predict(self, ids: np.ndarray, training: bool = False) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        flat = self.embedding.lookup(ids.reshape(-1))
        e0 = ad.reshape(flat, (ids.shape[0], self.n_fields * self.embedding.spec.d))
        e = e0
        for layer in self.cross:
            e = layer(e, e0)
        return ad.sigmoid(ad.reshape(self.mlp(e, rng=self.rng, training=training), (-1,)))

    def loss(self, ids, labels, lam: float, training: bool = True) -> Tensor:
        return ctr_loss(self.predict(ids, training), labels, self.params(), lam)

    def dense_params(self) -> list[Tensor]:
        return [p for layer in self.cross for p in layer.params()] + self.mlp.params()

