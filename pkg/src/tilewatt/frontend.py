"""Tile-config prediction: kernel-name parsing and a CART classifier over shape features."""
from __future__ import annotations

import functools
import math
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .kernels import SHAPE_FIELDS, OperatorSpec, OpKind, Precision, TileConfig

# -- kernel-name parsing --------------------------------------------------------

_PRECISION_TOKENS = (  # checked in this order; first hit wins
    ("bfloat16", "bf16"), ("bf16", "bf16"), ("tf32", "tf32"), ("half", "f16"), ("fp16", "f16"), ("f16", "f16"), ("fp32", "f32"), ("f32", "f32"),
)
_SEP = r"(?:^|[_<>(,:\s])"
_END = r"(?=$|[_<>(),:\s])"

_RE_TILESIZE = re.compile(r"tilesize(\d+)x(\d+)x(\d+)")
_RE_CUTLASS = re.compile(_SEP + r"(\d+)x(\d+)_(\d+)x(\d+)" + _END)
_RE_TILE = re.compile(_SEP + r"(\d+)x(\d+)" + _END)
_RE_STAGES_BK = re.compile(r"stages_(\d+)x(\d+)")
_RE_STAGES = re.compile(r"_stages?(\d+)" + _END)
_RE_MMA = re.compile(r"(?:^|_)([shid]?)(16\d{2,4}|8\d{2})gemm")
_RE_GEMMSHAPE = re.compile(r"GemmShape<\s*(\d+),\s*(\d+),\s*(\d+)\s*>")
_RE_TENSOR = re.compile(r"tensor(\d+)x(\d+)x(\d+)")
_RE_WARP = re.compile(r"warpsize(\d+)x(\d+)x\d+")
_RE_LAYOUT = re.compile(_SEP + r"(nn|nt|tn|tt)" + _END)
_RE_SIMT = re.compile(r"(?:^|_)(sgemm|hgemm|dgemm)" + _END)
_RE_PREC = re.compile(r"(bfloat16|bf16|tf32|half|fp16|f16|fp32|f32)")


@dataclass(frozen=True)
class ParsedName:
    """Fields recovered from a kernel name and, per field, the token that set it."""

    name: str
    fields: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    @property
    def empty(self) -> bool:
        return not self.fields

    def get(self, key, default=None):
        return self.fields.get(key, default)

    @property
    def precision(self) -> Precision | None:
        return {"bf16": Precision.BF16, "f32": Precision.FP32}.get(self.fields.get("precision"))


class ParseEmpty(ParsedName):
    """Result for names with no recognizable token."""


def _decode_mma(digits: str):
    """``16816`` -> (16, 8, 16), ``884`` -> (8, 8, 4), ``161616`` -> (16, 16, 16)."""
    m = 16 if digits.startswith("16") else 8
    rest = digits[2:] if m == 16 else digits[1:]
    n = 16 if rest.startswith("16") and len(rest) > 3 else int(rest[0])
    k = rest[len(str(n)):]
    return (m, n, int(k))


def parse_kernel_name(name: str) -> ParsedName:
    """Recover tile, stage, MMA, precision, layout and warp tokens from a library kernel name.

    Total: never raises on string input. Unknown fields stay unset.
    """
    text = str(name)
    fields, prov = {}, {}

    def put(key, value, token):
        if key not in fields:
            fields[key] = value
            prov[key] = token

    if m := _RE_TILESIZE.search(text):
        bm, bn, bk = map(int, m.groups())
        put("bm", bm, m.group(0)); put("bn", bn, m.group(0)); put("bk", bk, m.group(0))
    shapes = _RE_GEMMSHAPE.findall(text)
    if shapes:
        # CUTLASS templates list threadblock, warp and instruction shapes in that order
        tb = tuple(map(int, shapes[0]))
        tok = "GemmShape<{}, {}, {}>".format(*tb)
        put("bm", tb[0], tok); put("bn", tb[1], tok); put("bk", tb[2], tok)
        if len(shapes) > 1:
            wt = tuple(map(int, shapes[1]))
            if wt[0] and wt[1] and tb[0] % wt[0] == 0 and tb[1] % wt[1] == 0:
                put("warp_grid", (tb[0] // wt[0], tb[1] // wt[1]), "GemmShape<{}, {}, {}>".format(*wt))
        if len(shapes) > 2:
            put("instr", tuple(map(int, shapes[2])), "GemmShape<{}, {}, {}>".format(*shapes[2]))
    if m := _RE_CUTLASS.search(text):
        bm, bn, bk, s = map(int, m.groups())
        tok = m.group(0).strip("_<>(,: ")
        put("bm", bm, tok); put("bn", bn, tok); put("bk", bk, tok); put("stages", s, tok)
    if m := _RE_STAGES_BK.search(text):
        bk, s = map(int, m.groups())
        put("bk", bk, m.group(0)); put("stages", s, m.group(0))
    if m := _RE_STAGES.search(text):
        put("stages", int(m.group(1)), m.group(0).lstrip("_"))
    if "bm" not in fields and (m := _RE_TILE.search(text)):
        bm, bn = map(int, m.groups())
        tok = m.group(0).strip("_<>(,: ")
        put("bm", bm, tok); put("bn", bn, tok)
    if m := _RE_MMA.search(text):
        put("instr", _decode_mma(m.group(2)), m.group(0).lstrip("_"))
        if m.group(1) == "h":
            put("_mma_prec", "f16", m.group(0))
    if m := _RE_TENSOR.search(text):
        put("instr", tuple(map(int, m.groups())), m.group(0))
    if m := _RE_WARP.search(text):
        put("warp_grid", tuple(map(int, m.groups())), m.group(0))
    if m := _RE_LAYOUT.search(text):
        put("layout", m.group(1), m.group(1))
    for tok in re.split(r"[_<>(),:\s]+", text):
        if p := _RE_PREC.match(tok):
            put("precision", dict(_PRECISION_TOKENS)[p.group(1)], tok)
            break
    if "precision" not in fields:
        if "_mma_prec" in fields:
            put("precision", fields["_mma_prec"], prov["_mma_prec"])
        elif m := _RE_SIMT.search(text):
            put("precision", {"sgemm": "f32", "hgemm": "f16", "dgemm": "f64"}[m.group(1)], m.group(1))
    fields.pop("_mma_prec", None)
    prov.pop("_mma_prec", None)
    cls = ParsedName if fields else ParseEmpty
    return cls(text, fields, prov)


def tile_from_parsed(parsed: ParsedName, kind: OpKind, base: TileConfig | None = None) -> TileConfig | None:
    """Fill a TileConfig from parsed fields over ``base``; None if the tile shape is missing."""
    if kind is not OpKind.GEMM or "bm" not in parsed.fields:
        return None
    base = base or default_tile(OperatorSpec.gemm(1, 1, 1, precision=parsed.precision or "bf16"))
    bk = parsed.get("bk", base.tb_tile[2])
    return TileConfig(
        tb_tile=(parsed.get("bm"), parsed.get("bn"), bk),
        warp_grid=parsed.get("warp_grid", base.warp_grid),
        instr_tile=parsed.get("instr", base.instr_tile),
        pipeline_stages=parsed.get("stages", base.pipeline_stages),
        epilogue_via_shared=base.epilogue_via_shared,
        concurrent_tbs_per_sm=base.concurrent_tbs_per_sm,
    )


# -- features -------------------------------------------------------------------

def log2_bucket(x: int):
    """floor(log2 x) plus a bit that is set when x is not a power of two."""
    b = int(x).bit_length() - 1
    return b, int(x != 1 << b)


def shape_features(op: OperatorSpec) -> np.ndarray:
    return np.asarray(_feature_list(op), dtype=float)


def _feature_list(op: OperatorSpec) -> list:
    feats = []
    shape = op.shape
    for v in shape:
        v = max(int(v), 1)
        b = v.bit_length() - 1
        feats += (b, int(v != 1 << b))
    if op.kind is OpKind.GEMM:
        _, m, n, k = shape
        feats.append(math.log2(m / n))
        feats.append(math.log2(k / max(m, n)))
    elif op.kind is OpKind.FLASH_ATTENTION:
        feats.append(math.log2(shape[2] / shape[3]))
    return feats


def feature_names(kind: OpKind):
    names = []
    for f in SHAPE_FIELDS[OpKind(kind)]:
        names += [f"log2_{f}", f"rem_{f}"]
    if kind is OpKind.GEMM:
        names += ["log2_m_over_n", "log2_k_over_maxmn"]
    elif kind is OpKind.FLASH_ATTENTION:
        names += ["log2_q_over_kv"]
    return names


@dataclass(frozen=True)
class ConfigSample:
    op: OperatorSpec
    tile: TileConfig

    @property
    def features(self) -> np.ndarray:
        return shape_features(self.op)

    @property
    def label(self) -> str:
        return self.tile.config_id


# -- CART -------------------------------------------------------------------------

_LEAF = -1


def _gini(counts, n):
    if n == 0:
        return 0.0
    p = counts / n
    return 1.0 - float(p @ p)


class CARTClassifier(ClassifierMixin, BaseEstimator):
    """Binary CART tree with Gini impurity.

    Ties between equally good splits go to the lowest feature index, then the
    smallest threshold, so training is deterministic given the sample order.
    Thresholds are midpoints between consecutive distinct feature values.
    """

    def __init__(self, max_depth=12, min_samples_leaf=1, min_samples_split=2):
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.min_samples_split = min_samples_split

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y)
        if X.shape[0] != y.shape[0]:
            raise ValueError("X and y lengths differ")
        if X.shape[0] < 1:
            raise ValueError("empty training set")
        self.classes_, yi = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        self.feature_ = []
        self.threshold_ = []
        self.left_ = []
        self.right_ = []
        self.value_ = []
        self._grow(X, yi, np.arange(X.shape[0]), 0)
        self.feature_ = np.asarray(self.feature_, dtype=int)
        self.threshold_ = np.asarray(self.threshold_, dtype=float)
        self.left_ = np.asarray(self.left_, dtype=int)
        self.right_ = np.asarray(self.right_, dtype=int)
        self.value_ = np.asarray(self.value_, dtype=float).reshape(-1, len(self.classes_))
        self.__dict__.pop("_fast", None)
        self.train_accuracy_ = float(np.mean(self.predict(X) == y))
        return self

    def _new_node(self, counts):
        self.feature_.append(_LEAF)
        self.threshold_.append(0.0)
        self.left_.append(_LEAF)
        self.right_.append(_LEAF)
        self.value_.append(counts)
        return len(self.feature_) - 1

    def _grow(self, X, y, idx, depth):
        k = len(self.classes_)
        counts = np.bincount(y[idx], minlength=k).astype(float)
        node = self._new_node(counts)
        n = len(idx)
        if depth >= self.max_depth or n < self.min_samples_split or counts.max() == n:
            return node
        split = self._best_split(X[idx], y[idx], counts)
        if split is None:
            return node
        f, thr = split
        go_left = X[idx, f] <= thr
        self.feature_[node] = f
        self.threshold_[node] = thr
        self.left_[node] = self._grow(X, y, idx[go_left], depth + 1)
        self.right_[node] = self._grow(X, y, idx[~go_left], depth + 1)
        return node

    def _best_split(self, X, y, counts):
        n, k = len(y), len(self.classes_)
        parent = _gini(counts, n)
        best = None  # (impurity, feature, threshold)
        leaf = self.min_samples_leaf
        for f in range(X.shape[1]):
            order = np.argsort(X[:, f], kind="stable")
            xs, ys = X[order, f], y[order]
            onehot = np.zeros((n, k))
            onehot[np.arange(n), ys] = 1.0
            left = np.cumsum(onehot, axis=0)[:-1]
            nl = np.arange(1, n, dtype=float)
            right = counts - left
            nr = n - nl
            valid = (xs[1:] > xs[:-1]) & (nl >= leaf) & (nr >= leaf)
            if not valid.any():
                continue
            gl = 1.0 - np.sum((left / nl[:, None]) ** 2, axis=1)
            gr = 1.0 - np.sum((right / nr[:, None]) ** 2, axis=1)
            imp = (nl * gl + nr * gr) / n
            imp = np.where(valid, imp, np.inf)
            # round away float noise so exact ties really tie
            imp = np.round(imp, 12)
            i = int(np.argmin(imp))  # first minimum = smallest threshold
            if best is None or imp[i] < best[0]:
                best = (imp[i], f, (xs[i] + xs[i + 1]) / 2.0)
        if best is None or best[0] >= round(parent, 12):
            return None
        return best[1], best[2]

    def apply(self, X):
        check_is_fitted(self, "value_")
        X = check_array(X, dtype=np.float64)
        out = np.empty(X.shape[0], dtype=int)
        for r, row in enumerate(X):
            node = 0
            while self.feature_[node] != _LEAF:
                node = self.left_[node] if row[self.feature_[node]] <= self.threshold_[node] else self.right_[node]
            out[r] = node
        return out

    def predict_row(self, row):
        """Label for one feature row without array validation (hot path of per-operator prediction)."""
        fast = self.__dict__.get("_fast")
        if fast is None:
            fast = (self.feature_.tolist(), self.threshold_.tolist(), self.left_.tolist(), self.right_.tolist(),
                    [self.classes_[i] for i in np.argmax(self.value_, axis=1)])
            self._fast = fast
        feat, thr, left, right, label = fast
        node = 0
        while feat[node] != _LEAF:
            node = left[node] if row[feat[node]] <= thr[node] else right[node]
        return label[node]

    def predict_proba(self, X):
        v = self.value_[self.apply(X)]
        return v / v.sum(axis=1, keepdims=True)

    def predict(self, X):
        # argmax takes the first class on ties: the lexicographically smallest label
        return self.classes_[np.argmax(self.value_[self.apply(X)], axis=1)]

    @property
    def depth_(self) -> int:
        def walk(node):
            if self.feature_[node] == _LEAF:
                return 0
            return 1 + max(walk(self.left_[node]), walk(self.right_[node]))
        return walk(0)

    def to_dict(self) -> dict:
        check_is_fitted(self, "value_")
        return {
            "params": self.get_params(),
            "classes": [str(c) for c in self.classes_],
            "n_features": int(self.n_features_in_),
            "feature": self.feature_.tolist(),
            "threshold": self.threshold_.tolist(),
            "left": self.left_.tolist(),
            "right": self.right_.tolist(),
            "value": self.value_.tolist(),
            "train_accuracy": self.train_accuracy_,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CARTClassifier":
        tree = cls(**doc["params"])
        tree.classes_ = np.asarray(doc["classes"])
        tree.n_features_in_ = int(doc["n_features"])
        tree.feature_ = np.asarray(doc["feature"], dtype=int)
        tree.threshold_ = np.asarray(doc["threshold"], dtype=float)
        tree.left_ = np.asarray(doc["left"], dtype=int)
        tree.right_ = np.asarray(doc["right"], dtype=int)
        tree.value_ = np.asarray(doc["value"], dtype=float).reshape(-1, len(tree.classes_))
        tree.train_accuracy_ = float(doc.get("train_accuracy", float("nan")))
        return tree


def train_config_predictor(samples, **params):
    """Fit one CART tree on ``ConfigSample`` s; returns ``(tree, training accuracy)``."""
    samples = list(samples)
    if len(samples) < 1:
        raise ValueError("empty config dataset")
    X = np.vstack([s.features for s in samples])
    y = np.array([s.label for s in samples])
    tree = CARTClassifier(**params).fit(X, y)
    return tree, tree.train_accuracy_


# -- prediction with rules and defaults --------------------------------------------

REDUCTION_TB_CAP = 1024
ELEMENTWISE_TB = 1024

DEFAULT_TILES = {
    (OpKind.GEMM, Precision.BF16): TileConfig((128, 128, 32), (2, 2), (16, 8, 16), 3),
    (OpKind.GEMM, Precision.FP32): TileConfig((128, 128, 8), (2, 4), (1, 1, 1), 3),
    (OpKind.FLASH_ATTENTION, Precision.BF16): TileConfig((128, 64), (4, 1), (16, 8, 16), 2),
    (OpKind.FLASH_ATTENTION, Precision.FP32): TileConfig((64, 64), (4, 1), (1, 1, 1), 1),
}


def default_tile(op: OperatorSpec) -> TileConfig:
    if op.kind.is_reduction:
        return TileConfig((min(op.cols, REDUCTION_TB_CAP),))
    if op.kind is OpKind.ELEMENTWISE:
        return TileConfig((ELEMENTWISE_TB,))
    return DEFAULT_TILES[(op.kind, op.precision)]


@functools.lru_cache(maxsize=None)
def _tile_from_id(config_id: str) -> TileConfig:
    return TileConfig.from_id(config_id)


@dataclass(frozen=True)
class PredictedTile:
    tile: TileConfig
    source: str  # "tree", "rule", "default"

    @property
    def fallback(self) -> bool:
        return self.source == "default"


class TileConfigPredictor(BaseEstimator):
    """One CART tree per (kind, precision) over tiled kinds; rules for the rest.

    ``fit`` takes ``OperatorSpec`` s and the ``TileConfig`` s they ran with.
    Labels are config ids, so only configs seen in training can be predicted.
    """

    def __init__(self, max_depth=12, min_samples_leaf=5):
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf

    def fit(self, ops, tiles):
        ops, tiles = list(ops), list(tiles)
        if len(ops) != len(tiles):
            raise ValueError("ops and tiles lengths differ")
        by_group = {}
        for op, tile in zip(ops, tiles):
            if op.kind in (OpKind.GEMM, OpKind.FLASH_ATTENTION):
                by_group.setdefault((op.kind, op.precision), []).append(ConfigSample(op, tile))
        self.trees_ = {}
        self.train_accuracy_ = {}
        for key in sorted(by_group, key=lambda k: (k[0].value, k[1].value)):
            tree, acc = train_config_predictor(by_group[key], max_depth=self.max_depth,
                                               min_samples_leaf=self.min_samples_leaf)
            self.trees_[key] = tree
            self.train_accuracy_[key] = acc
        return self

    def predict_one(self, op: OperatorSpec) -> PredictedTile:
        if op.kind.is_reduction or op.kind is OpKind.ELEMENTWISE:
            return PredictedTile(default_tile(op), "rule")
        tree = getattr(self, "trees_", {}).get((op.kind, op.precision))
        if tree is None:
            return PredictedTile(default_tile(op), "default")
        label = str(tree.predict_row(_feature_list(op)))
        return PredictedTile(_tile_from_id(label), "tree")

    def predict(self, ops):
        return [self.predict_one(op).tile for op in ops]

    def score(self, ops, tiles) -> float:
        pred = self.predict(ops)
        return float(np.mean([p.config_id == t.config_id for p, t in zip(pred, tiles)]))

    def to_dict(self) -> dict:
        return {f"{k.value}/{p.value}": t.to_dict() for (k, p), t in getattr(self, "trees_", {}).items()}

    @classmethod
    def from_dict(cls, doc: dict) -> "TileConfigPredictor":
        pred = cls()
        pred.trees_ = {}
        pred.train_accuracy_ = {}
        for key, tdoc in doc.items():
            kind, prec = key.split("/")
            tree = CARTClassifier.from_dict(tdoc)
            pred.trees_[(OpKind(kind), Precision(prec))] = tree
            pred.train_accuracy_[(OpKind(kind), Precision(prec))] = tree.train_accuracy_
        return pred


def predict_tile_config(predictor: TileConfigPredictor | None, op: OperatorSpec) -> PredictedTile:
    if predictor is None:
        if op.kind.is_reduction or op.kind is OpKind.ELEMENTWISE:
            return PredictedTile(default_tile(op), "rule")
        return PredictedTile(default_tile(op), "default")
    return predictor.predict_one(op)


def label_counts(samples) -> Counter:
    return Counter(s.label for s in samples)


# -- rule-generated config data -----------------------------------------------------

# A small vendor-style heuristic over (M, N, K): large outputs get a wide tile,
# long reductions a deeper BK, skinny outputs a narrow tile.
RULE_TILES = {
    "large": TileConfig((256, 128, 32), (4, 2), (16, 8, 16), 3),
    "deep_k": TileConfig((128, 128, 64), (2, 2), (16, 8, 16), 3),
    "skinny": TileConfig((64, 128, 32), (2, 2), (16, 8, 16), 4),
    "base": TileConfig((128, 128, 32), (2, 2), (16, 8, 16), 3),
}


def rule_config(m: int, n: int, k: int) -> TileConfig:
    if m >= 2048 and n >= 2048:
        return RULE_TILES["large"]
    if k >= 4096:
        return RULE_TILES["deep_k"]
    if m < 256:
        return RULE_TILES["skinny"]
    return RULE_TILES["base"]


def generate_config_dataset(seed: int, n: int, label_noise: float = 0.05, precision="bf16",
                            dim_range=(32, 16384)):
    """GEMM shapes labeled by :func:`rule_config`; a ``label_noise`` fraction get a wrong label.

    Dims are log-uniform in ``dim_range``. Returns ``(ops, tiles)``.
    """
    if not 0 <= label_noise <= 1:
        raise ValueError("label_noise must be in [0, 1]")
    rng = np.random.default_rng(seed)
    lo, hi = math.log(dim_range[0]), math.log(dim_range[1])
    names = list(RULE_TILES)
    ops, tiles = [], []
    for _ in range(n):
        m, nn, k = (int(round(math.exp(rng.uniform(lo, hi)))) for _ in range(3))
        op = OperatorSpec.gemm(m, nn, k, precision=precision)
        tile = rule_config(m, nn, k)
        if rng.random() < label_noise:
            others = [t for t in names if RULE_TILES[t] != tile]
            tile = RULE_TILES[others[int(rng.integers(len(others)))]]
        ops.append(op)
        tiles.append(tile)
    return ops, tiles
