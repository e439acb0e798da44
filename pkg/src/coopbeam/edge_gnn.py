"""Bipartite GNN over BS and UE nodes with learned edge updates.

The network maps (per-BS power budgets, per-UE noise powers, channel tensor)
to a beamformer tensor living on the graph edges.  It runs a preprocessing
layer (node/edge-wise MLPs), L updating layers, and an edge-wise
postprocessing MLP followed by projection onto the per-BS power balls.

Each updating layer computes, from the previous layer's state only:

- BS rows:   MLP2( f_bs_m , max_k MLP1( f_ue_k , e_mk ) )
- UE rows:   MLP4( f_ue_k , max_m MLP3( f_bs_m , e_mk ) )
- edge rows: MLP7( e_mk , max over MLP5( e_mk1 , f_bs_m ) for k1 != k
                          and   MLP6( e_m1k , f_ue_k ) for m1 != m )

All MLPs are applied node/edge-wise with shared weights and max aggregation
is order-invariant, so relabeling BSs and UEs relabels every output row
identically.  The maximum over an empty neighbor set is the zero vector.

Parameter shapes never depend on M or K, so one parameter set serves any
problem size with the same antenna count.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict
from functools import lru_cache

import numpy as np

from . import numerics as nm
from . import objective as obj

_MAGIC = b"COOPBMCK"
_CKPT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture hyperparameters (problem-size independent)."""

    num_layers: int = 2
    width: int = 64
    num_antennas: int = 2
    mlp_depth: int = 3
    aggregator: str = "max"

    def __post_init__(self):
        if self.num_layers < 1 or self.width < 1:
            raise ValueError("num_layers and width must be >= 1")
        if self.aggregator != "max":
            raise ValueError(f"unsupported aggregator {self.aggregator!r}")


@dataclass
class Topology:
    """Which UEs each BS serves and which BSs serve each UE.

    The default deployment is fully bipartite; the neighbor sets exist so
    partial serving patterns can restrict message aggregation.
    """

    m: int
    k: int
    nbr_bs: tuple      # per BS: tuple of served UE indices
    nbr_ue: tuple      # per UE: tuple of serving BS indices

    def __post_init__(self):
        for m, ks in enumerate(self.nbr_bs):
            for k in ks:
                if m not in self.nbr_ue[k]:
                    raise ValueError(f"asymmetric topology at BS {m}, UE {k}")
        for k, ms in enumerate(self.nbr_ue):
            for m in ms:
                if k not in self.nbr_bs[m]:
                    raise ValueError(f"asymmetric topology at UE {k}, BS {m}")

    @classmethod
    def full(cls, m, k):
        return cls(m, k,
                   tuple(tuple(range(k)) for _ in range(m)),
                   tuple(tuple(range(m)) for _ in range(k)))

    @property
    def is_full(self):
        return (all(len(ks) == self.k for ks in self.nbr_bs)
                and all(len(ms) == self.m for ms in self.nbr_ue))


@dataclass
class GraphState:
    """Layer state: BS rows (M, d), UE rows (K, d), edge rows (M*K, d).

    Edge rows are kept flat in row-major (m, k) order; ``edge_array`` gives
    the (M, K, d) view.
    """

    f_bs: nm.Tensor
    f_ue: nm.Tensor
    e_rep: nm.Tensor

    @property
    def m(self):
        return self.f_bs.shape[0]

    @property
    def k(self):
        return self.f_ue.shape[0]

    def edge_array(self):
        return self.e_rep.array().reshape(self.m, self.k, -1)

    @classmethod
    def from_arrays(cls, f_bs, f_ue, e_rep, tape=None):
        """Wrap numpy state (e_rep may be (M, K, d) or (M*K, d))."""
        e_rep = np.asarray(e_rep)
        e2 = e_rep.reshape(-1, e_rep.shape[-1])
        if tape is None:
            return cls(nm.constant(f_bs), nm.constant(f_ue), nm.constant(e2))
        return cls(tape.leaf(f_bs), tape.leaf(f_ue), tape.leaf(e2))


@dataclass
class Mlp:
    weights: list
    biases: list


@dataclass
class LayerParams:
    mlp1: Mlp
    mlp2: Mlp
    mlp3: Mlp
    mlp4: Mlp
    mlp5: Mlp
    mlp6: Mlp
    mlp7: Mlp


@dataclass
class ModelParams:
    config: ModelConfig
    pre_bs: Mlp
    pre_ue: Mlp
    pre_edge: Mlp
    layers: list
    post_edge: Mlp

    def named_arrays(self):
        """(name, array) pairs in the canonical (init/checkpoint) order."""
        for name, mlp in self._named_blocks():
            for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
                yield f"{name}.w{i}", w
                yield f"{name}.b{i}", b

    def _named_blocks(self):
        yield "pre_bs", self.pre_bs
        yield "pre_ue", self.pre_ue
        yield "pre_edge", self.pre_edge
        for l, lp in enumerate(self.layers, start=1):
            for j in range(1, 8):
                yield f"layer{l}.mlp{j}", getattr(lp, f"mlp{j}")
        yield "post_edge", self.post_edge

    @property
    def num_parameters(self):
        return sum(a.size for _, a in self.named_arrays())


def _block_dims(cfg):
    """(block name, [layer io dims]) in canonical order."""
    d, n, depth = cfg.width, cfg.num_antennas, cfg.mlp_depth

    def dims(n_in, n_out):
        return [n_in] + [d] * (depth - 1) + [n_out]

    blocks = [("pre_bs", dims(1, d)), ("pre_ue", dims(1, d)),
              ("pre_edge", dims(2 * n, d))]
    for l in range(1, cfg.num_layers + 1):
        for j in range(1, 8):
            blocks.append((f"layer{l}.mlp{j}", dims(2 * d, d)))
    blocks.append(("post_edge", dims(d, 2 * n)))
    return blocks


def _assemble(cfg, mlps):
    """Build ModelParams from a dict of block name -> Mlp."""
    layers = [LayerParams(*[mlps[f"layer{l}.mlp{j}"] for j in range(1, 8)])
              for l in range(1, cfg.num_layers + 1)]
    return ModelParams(cfg, mlps["pre_bs"], mlps["pre_ue"], mlps["pre_edge"],
                       layers, mlps["post_edge"])


def init_params(cfg, seed=0):
    """Glorot-uniform weights (+-sqrt(6/(fan_in+fan_out))), zero biases."""
    rng = np.random.default_rng(seed)
    mlps = {}
    for name, dims in _block_dims(cfg):
        ws, bs = [], []
        for n_in, n_out in zip(dims[:-1], dims[1:]):
            bound = np.sqrt(6.0 / (n_in + n_out))
            ws.append(rng.uniform(-bound, bound, size=(n_out, n_in))
                      .astype(np.float32))
            bs.append(np.zeros(n_out, dtype=np.float32))
        mlps[name] = Mlp(ws, bs)
    return _assemble(cfg, mlps)


def params_to_tensors(params, tape=None):
    """Mirror ModelParams with tensors: tape leaves (trainable) or constants."""
    wrap = tape.leaf if tape is not None else nm.constant
    mlps = {name: Mlp([wrap(w) for w in mlp.weights],
                      [wrap(b) for b in mlp.biases])
            for name, mlp in params._named_blocks()}
    return _assemble(params.config, mlps)


def mlp_apply(mlp, x, final_activation=True):
    """Node/edge-wise MLP: linear+ReLU stack, optionally bare final linear."""
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        x = nm.linear(x, w, b)
        if final_activation or i < last:
            x = nm.relu(x)
    return x


@lru_cache(maxsize=None)
def _full_indices(m, k):
    """Gather indices for the vectorized fully-bipartite updates."""
    idx_bs_of_edge = np.repeat(np.arange(m), k)       # row (m,k) -> m
    idx_ue_of_edge = np.tile(np.arange(k), m)         # row (m,k) -> k
    nbr = np.empty((m * k, m + k - 2), dtype=np.intp)
    for mm in range(m):
        for kk in range(k):
            row = [mm * k + k1 for k1 in range(k) if k1 != kk]
            row += [m * k + m1 * k + kk for m1 in range(m) if m1 != mm]
            nbr[mm * k + kk] = row
    return idx_bs_of_edge, idx_ue_of_edge, nbr


def _zeros_like_rows(rows, d):
    return nm.constant(np.zeros((rows, d), dtype=nm.default_dtype()))


def preprocess(inst, params):
    """Initial state from raw features via three node/edge-wise MLPs."""
    m, k, n = inst.m, inst.k, inst.n
    p_col = nm.constant(np.asarray(inst.f_bs, dtype=np.float64)[:, None])
    s_col = nm.constant(np.asarray(inst.f_ue, dtype=np.float64)[:, None])
    edge_feat = nm.constant(np.concatenate(
        [inst.e_re.reshape(m * k, n), inst.e_im.reshape(m * k, n)], axis=1))
    return GraphState(
        f_bs=mlp_apply(params.pre_bs, p_col),
        f_ue=mlp_apply(params.pre_ue, s_col),
        e_rep=mlp_apply(params.pre_edge, edge_feat),
    )


def bs_update(state, topo, params, l):
    """New BS rows from the previous layer's state (layer l in 1..L)."""
    p = params.layers[l - 1]
    m, k = state.m, state.k
    d = state.f_bs.shape[1]
    if topo.is_full:
        _, idx_ue, _ = _full_indices(m, k)
        t1 = mlp_apply(p.mlp1, nm.hcat([nm.gather_rows(state.f_ue, idx_ue),
                                        state.e_rep]))
        agg = nm.amax(nm.reshape(t1, (m, k, d)), axis=1)
    else:
        rows = []
        for mm in range(m):
            nbrs = topo.nbr_bs[mm]
            if not nbrs:
                rows.append(_zeros_like_rows(1, d))
                continue
            items = [mlp_apply(p.mlp1, nm.concat(
                [_row(state.f_ue, kk, d), _row(state.e_rep, mm * k + kk, d)]))
                for kk in nbrs]
            rows.append(nm.reshape(nm.reduce_max(items), (1, d)))
        agg = nm.vstack(rows)
    return mlp_apply(p.mlp2, nm.hcat([state.f_bs, agg]))


def ue_update(state, topo, params, l):
    """New UE rows; reverses the roles of BSs and UEs in the BS update."""
    p = params.layers[l - 1]
    m, k = state.m, state.k
    d = state.f_ue.shape[1]
    if topo.is_full:
        idx_bs, _, _ = _full_indices(m, k)
        t3 = mlp_apply(p.mlp3, nm.hcat([nm.gather_rows(state.f_bs, idx_bs),
                                        state.e_rep]))
        agg = nm.amax(nm.reshape(t3, (m, k, d)), axis=0)
    else:
        rows = []
        for kk in range(k):
            nbrs = topo.nbr_ue[kk]
            if not nbrs:
                rows.append(_zeros_like_rows(1, d))
                continue
            items = [mlp_apply(p.mlp3, nm.concat(
                [_row(state.f_bs, mm, d), _row(state.e_rep, mm * k + kk, d)]))
                for mm in nbrs]
            rows.append(nm.reshape(nm.reduce_max(items), (1, d)))
        agg = nm.vstack(rows)
    return mlp_apply(p.mlp4, nm.hcat([state.f_ue, agg]))


def edge_update(state, topo, params, l):
    """New edge rows; neighbors of edge (m,k) are the other edges at BS m
    (transformed with the BS row) and the other edges at UE k (transformed
    with the UE row), aggregated jointly."""
    p = params.layers[l - 1]
    m, k = state.m, state.k
    d = state.e_rep.shape[1]
    if topo.is_full:
        idx_bs, idx_ue, nbr = _full_indices(m, k)
        if nbr.shape[1] == 0:
            agg = _zeros_like_rows(m * k, d)
        else:
            t5 = mlp_apply(p.mlp5, nm.hcat(
                [state.e_rep, nm.gather_rows(state.f_bs, idx_bs)]))
            t6 = mlp_apply(p.mlp6, nm.hcat(
                [state.e_rep, nm.gather_rows(state.f_ue, idx_ue)]))
            agg = nm.amax(nm.gather_rows(nm.vstack([t5, t6]), nbr), axis=1)
    else:
        rows = []
        for mm in range(m):
            for kk in range(k):
                items = [mlp_apply(p.mlp5, nm.concat(
                    [_row(state.e_rep, mm * k + k1, d), _row(state.f_bs, mm, d)]))
                    for k1 in topo.nbr_bs[mm] if k1 != kk]
                items += [mlp_apply(p.mlp6, nm.concat(
                    [_row(state.e_rep, m1 * k + kk, d), _row(state.f_ue, kk, d)]))
                    for m1 in topo.nbr_ue[kk] if m1 != mm]
                if items:
                    rows.append(nm.reshape(nm.reduce_max(items), (1, d)))
                else:
                    rows.append(_zeros_like_rows(1, d))
        agg = nm.vstack(rows)
    return mlp_apply(p.mlp7, nm.hcat([state.e_rep, agg]))


def _row(t, i, d):
    return nm.take(t, np.arange(i * d, (i + 1) * d))


def postprocess(state, inst, params, power_scheme="project"):
    """Edge-wise MLP to 2N reals per edge, read as complex beams, then the
    power constraint: projection (default) or scaling to the boundary."""
    m, k, n = inst.m, inst.k, inst.n
    out = mlp_apply(params.post_edge, state.e_rep, final_activation=False)
    v = nm.ComplexSplit(nm.slice_cols(out, 0, n), nm.slice_cols(out, n, 2 * n))
    if power_scheme == "project":
        v = obj.project_power_graph(v, inst.f_bs, m, k)
    elif power_scheme == "boundary":
        power = obj.bs_power_graph(v, m, k)
        ratio = nm.div(nm.constant(np.asarray(inst.f_bs)),
                       nm.add_scalar(power, 1e-30))
        per_row = nm.take(nm.sqrt(ratio), np.repeat(np.arange(m), k))
        v = nm.ComplexSplit(nm.rowscale(v.re, per_row),
                            nm.rowscale(v.im, per_row))
    else:
        raise ValueError(f"unknown power scheme {power_scheme!r}")
    return nm.ComplexSplit(nm.reshape(v.re, (m, k, n)),
                           nm.reshape(v.im, (m, k, n)))


def forward_graph(inst, topo, params, power_scheme="project"):
    """Full pass with pre-wrapped tensor parameters (see params_to_tensors)."""
    state = preprocess(inst, params)
    for l in range(1, len(params.layers) + 1):
        state = GraphState(bs_update(state, topo, params, l),
                           ue_update(state, topo, params, l),
                           edge_update(state, topo, params, l))
    return postprocess(state, inst, params, power_scheme)


def forward(inst, topo=None, params=None, tape=None, power_scheme="project"):
    """Beamformer ComplexSplit (M, K, N) for one instance.

    Without a tape this is a pure evaluation; with a tape the parameters
    become leaves so the output is differentiable w.r.t. them.
    """
    if topo is None:
        topo = Topology.full(inst.m, inst.k)
    return forward_graph(inst, topo, params_to_tensors(params, tape),
                         power_scheme)


def infer(params, inst, topo=None, power_scheme="project"):
    """Pure-evaluation forward returning a complex (M, K, N) ndarray."""
    return forward(inst, topo, params, power_scheme=power_scheme).numpy()


# ---------------------------------------------------------------------------
# permutations

@dataclass
class PermutationPair:
    """Joint relabeling: BS m -> pi1[m], UE k -> pi2[k]."""

    pi1: np.ndarray
    pi2: np.ndarray

    def __post_init__(self):
        self.pi1 = np.asarray(self.pi1, dtype=np.intp)
        self.pi2 = np.asarray(self.pi2, dtype=np.intp)
        for pi in (self.pi1, self.pi2):
            if sorted(pi.tolist()) != list(range(pi.size)):
                raise ValueError(f"not a permutation: {pi}")

    def inverse(self):
        return PermutationPair(np.argsort(self.pi1), np.argsort(self.pi2))


def random_permutation_pair(m, k, seed=0):
    rng = np.random.default_rng(seed)
    return PermutationPair(rng.permutation(m), rng.permutation(k))


def apply_permutation(x, p):
    """Relabel the BS/UE axes of an instance, beamformer, or topology."""
    from .scenario import ProblemInstance
    from dataclasses import replace

    if isinstance(x, ProblemInstance):
        e_re = np.empty_like(x.e_re)
        e_im = np.empty_like(x.e_im)
        e_re[np.ix_(p.pi1, p.pi2)] = x.e_re
        e_im[np.ix_(p.pi1, p.pi2)] = x.e_im
        f_bs = np.empty_like(x.f_bs)
        f_ue = np.empty_like(x.f_ue)
        f_bs[p.pi1] = x.f_bs
        f_ue[p.pi2] = x.f_ue
        return replace(x, e_re=e_re, e_im=e_im, f_bs=f_bs, f_ue=f_ue)
    if isinstance(x, Topology):
        nbr_bs = [()] * x.m
        nbr_ue = [()] * x.k
        for m, ks in enumerate(x.nbr_bs):
            nbr_bs[p.pi1[m]] = tuple(sorted(int(p.pi2[k]) for k in ks))
        for k, ms in enumerate(x.nbr_ue):
            nbr_ue[p.pi2[k]] = tuple(sorted(int(p.pi1[m]) for m in ms))
        return Topology(x.m, x.k, tuple(nbr_bs), tuple(nbr_ue))
    if isinstance(x, np.ndarray):
        out = np.empty_like(x)
        out[np.ix_(p.pi1, p.pi2)] = x
        return out
    raise TypeError(f"cannot permute {type(x).__name__}")


def permute_state(f_bs, f_ue, e_rep, p):
    """Relabel numpy layer-state arrays (e_rep given as (M, K, d))."""
    new_bs = np.empty_like(f_bs)
    new_ue = np.empty_like(f_ue)
    new_e = np.empty_like(e_rep)
    new_bs[p.pi1] = f_bs
    new_ue[p.pi2] = f_ue
    new_e[np.ix_(p.pi1, p.pi2)] = e_rep
    return new_bs, new_ue, new_e


# ---------------------------------------------------------------------------
# parameter flattening (gradient checks) and checkpoints

def param_vector(params):
    """All parameters concatenated in canonical order (float64 copy)."""
    return np.concatenate([a.reshape(-1).astype(np.float64)
                           for _, a in params.named_arrays()])


def params_from_vector(vec, cfg):
    """Rebuild ModelParams (float32 arrays) from a flat vector."""
    mlps = {}
    off = 0
    for name, dims in _block_dims(cfg):
        ws, bs = [], []
        for n_in, n_out in zip(dims[:-1], dims[1:]):
            ws.append(np.asarray(vec[off:off + n_out * n_in], dtype=np.float32)
                      .reshape(n_out, n_in).copy())
            off += n_out * n_in
            bs.append(np.asarray(vec[off:off + n_out], dtype=np.float32).copy())
            off += n_out
        mlps[name] = Mlp(ws, bs)
    if off != vec.size:
        raise ValueError(f"vector length {vec.size} != parameter count {off}")
    return _assemble(cfg, mlps)


def params_from_vector_graph(vec_tensor, cfg):
    """Carve a single leaf vector into tensor parameters (for grad checks)."""
    mlps = {}
    off = 0
    for name, dims in _block_dims(cfg):
        ws, bs = [], []
        for n_in, n_out in zip(dims[:-1], dims[1:]):
            ws.append(nm.reshape(
                nm.take(vec_tensor, np.arange(off, off + n_out * n_in)),
                (n_out, n_in)))
            off += n_out * n_in
            bs.append(nm.take(vec_tensor, np.arange(off, off + n_out)))
            off += n_out
        mlps[name] = Mlp(ws, bs)
    return _assemble(cfg, mlps)


def save_checkpoint(path, params, extra=None, opt_arrays=None):
    """Single-file checkpoint: JSON manifest + little-endian float32 blob."""
    entries = list(params.named_arrays())
    if opt_arrays:
        entries += [(f"opt.{name}", a) for name, a in opt_arrays.items()]
    index = {}
    blob = bytearray()
    for name, a in entries:
        index[name] = {"shape": list(a.shape), "offset": len(blob)}
        blob += np.ascontiguousarray(a, dtype="<f4").tobytes()
    header = json.dumps({
        "config": asdict(params.config),
        "tensors": index,
        "extra": extra or {},
    }, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IQ", _CKPT_VERSION, len(header)))
        f.write(header)
        f.write(bytes(blob))


def load_checkpoint(path):
    """Returns (params, extra dict, opt array dict)."""
    with open(path, "rb") as f:
        if f.read(8) != _MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        version, hlen = struct.unpack("<IQ", f.read(12))
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(f.read(hlen))
        blob = f.read()
    cfg = ModelConfig(**header["config"])
    arrays = {}
    for name, meta in header["tensors"].items():
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(
            blob, dtype="<f4", count=count, offset=meta["offset"]
        ).reshape(shape).copy()
    mlps = {}
    for name, dims in _block_dims(cfg):
        ws = [arrays[f"{name}.w{i}"] for i in range(len(dims) - 1)]
        bs = [arrays[f"{name}.b{i}"] for i in range(len(dims) - 1)]
        mlps[name] = Mlp(ws, bs)
    params = _assemble(cfg, mlps)
    opt = {name[len("opt."):]: a for name, a in arrays.items()
           if name.startswith("opt.")}
    return params, header["extra"], opt
