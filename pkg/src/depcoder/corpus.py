"""Corpus management: per-function pipeline artifacts with content hashing.

A corpus binds every function of a listing to its tokenization, dependence
graph, connectivity graph and mask bundle.  Artifacts are derived once per
function; an optional on-disk cache is keyed by the hash of the function's
text so a stale entry is recomputed, never silently reused.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

from .config import RunConfig
from .connectivity import ConnectivityGraph, connectivity
from .dependence import DependenceGraph, dependence_graph
from .frontend import ParsedFunction, TokenSequence, Vocabulary, build_vocab, parse_listing, tokenize
from .masks import MaskBundle, build_bundle


def function_text(fn: ParsedFunction) -> str:
    lines = [f".func {fn.name}"]
    by_index: dict[int, list[str]] = {}
    for label, idx in fn.labels.items():
        by_index.setdefault(idx, []).append(label)
    for instr in fn.instructions:
        for label in by_index.get(instr.index, []):
            lines.append(f"{label}:")
        lines.append(instr.raw_text)
    for label in by_index.get(len(fn.instructions), []):
        lines.append(f"{label}:")
    return "\n".join(lines) + "\n"


def content_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class FunctionArtifacts:
    fn: ParsedFunction
    text: str
    sha: str
    seq: TokenSequence
    deps: DependenceGraph
    con: ConnectivityGraph
    bundle: MaskBundle

    @property
    def name(self) -> str:
        return self.fn.name


def compute_artifacts(fn: ParsedFunction, vocab: Vocabulary,
                      cfg: RunConfig) -> FunctionArtifacts:
    text = function_text(fn)
    seq = tokenize(fn.instructions, vocab, cfg.max_len)
    deps = dependence_graph(fn, flags_channel=cfg.flags_dep, on_unknown=cfg.on_unknown)
    con = connectivity(deps, node_cap=cfg.node_cap)
    bundle = build_bundle(seq, con, neg=cfg.mask_neg)
    return FunctionArtifacts(fn=fn, text=text, sha=content_hash(text), seq=seq,
                             deps=deps, con=con, bundle=bundle)


@dataclass
class Corpus:
    functions: list[FunctionArtifacts]
    vocab: Vocabulary
    config: RunConfig
    by_name: dict[str, FunctionArtifacts] = field(default_factory=dict)

    def __post_init__(self):
        self.by_name = {f.name: f for f in self.functions}

    def __len__(self) -> int:
        return len(self.functions)

    @classmethod
    def from_text(cls, listing: str, cfg: RunConfig,
                  vocab: Vocabulary | None = None) -> "Corpus":
        parsed = parse_listing(listing)
        if vocab is None:
            vocab = build_vocab([listing], min_freq=cfg.vocab_min_freq)
        arts = [compute_artifacts(fn, vocab, cfg) for fn in parsed]
        return cls(functions=arts, vocab=vocab, config=cfg)

    @classmethod
    def from_file(cls, path, cfg: RunConfig, vocab: Vocabulary | None = None) -> "Corpus":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), cfg, vocab)


# ---------------------------------------------------------------------------
# On-disk artifact cache (used by the pipeline command)

def cached_artifact_dict(fn: ParsedFunction, vocab: Vocabulary, cfg: RunConfig,
                         cache_dir: str | None = None) -> dict:
    """Artifacts of one function as a JSON-ready dict, going through the cache
    when one is configured.  A hash mismatch triggers recomputation."""
    text = function_text(fn)
    sha = content_hash(text)
    cache_path = None
    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)
        cache_path = os.path.join(cache_dir, f"{fn.name}.json")
        if os.path.exists(cache_path):
            with open(cache_path, encoding="utf-8") as fh:
                entry = json.load(fh)
            if entry.get("sha") == sha:
                return entry["artifacts"]
    arts = compute_artifacts(fn, vocab, cfg)
    out = {
        "function": fn.name,
        "tokens": {
            "ids": arts.seq.tokens,
            "surface": arts.seq.surface,
            "inst_of": arts.seq.inst_of,
            "inst_positions": {str(k): v for k, v in arts.seq.inst_positions.items()},
        },
        "deps": arts.deps.to_dict(),
        "connectivity": arts.con.to_dict(),
    }
    if cache_path:
        tmp = cache_path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump({"sha": sha, "artifacts": out}, fh, sort_keys=True)
        os.replace(tmp, cache_path)
    return out
