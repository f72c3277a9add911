"""Prompt bank: learnable normal prefixes transposed into anomaly prompts.

A bank for one object category holds N learnable prefix blocks and L
learnable anomaly-suffix blocks.  Concatenation produces three prompt
families:

* normal prompts            ``[prefix_i][object]``                  (N)
* manual anomaly prompts    ``[prefix_i][object][frozen suffix_j]``  (N*M)
* learned anomaly prompts   ``[prefix_i][object][learned suffix_j]`` (N*L)

Prompts sharing a prefix or suffix reference the same parameter block,
so the bank owns exactly N + L trainable blocks no matter how many
prompts it yields.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import torch
from torch import Tensor, nn

from .errors import InputError
from .tokenizer import Tokenizer

# Object-independent anomaly suffixes, used when a dataset provides no
# defect labels of its own and always merged with the per-object ones.
DEFAULT_GENERIC_SUFFIXES = [
    "with flaw",
    "with defect",
    "with damage",
    "with crack",
    "with scratch",
    "with hole",
    "with contamination",
    "with stain",
    "with broken part",
    "with missing part",
]


class PromptKind(enum.Enum):
    NORMAL = "normal"
    MANUAL_ANOMALY = "manual_anomaly"
    LEARNED_ANOMALY = "learned_anomaly"


@dataclass
class SuffixLexicon:
    """Anomaly suffix strings: generic plus per-object, deduplicated.

    Object keys are matched with underscores and spaces interchangeable,
    so dataset directory names ("metal_nut") and prompt-ready names
    ("metal nut") address the same entry.
    """

    generic: list[str]
    per_object: dict[str, list[str]]

    @staticmethod
    def _norm(name: str) -> str:
        return name.replace("_", " ").strip()

    def for_object(self, object_name: str) -> list[str]:
        wanted = self._norm(object_name)
        specific = [
            suffix
            for key, suffixes in self.per_object.items()
            if self._norm(key) == wanted
            for suffix in suffixes
        ]
        merged: list[str] = []
        for suffix in specific + self.generic:
            suffix = suffix.strip()
            if not suffix:
                raise InputError(f"empty anomaly suffix for object {object_name!r}")
            if suffix not in merged:
                merged.append(suffix)
        return merged

    @classmethod
    def from_labels(cls, object_name: str, anomaly_labels: Sequence[str],
                    generic: Sequence[str] | None = None) -> "SuffixLexicon":
        """Build per-object suffixes from dataset defect labels."""
        suffixes = [f"with {label.replace('_', ' ')}" for label in anomaly_labels]
        return cls(
            generic=list(generic if generic is not None else DEFAULT_GENERIC_SUFFIXES),
            per_object={object_name: suffixes},
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "SuffixLexicon":
        """Parse a lexicon file: ``[generic]`` / ``[object:<name>]`` sections,
        one suffix per line, ``#`` comments."""
        path = Path(path)
        if not path.exists():
            raise InputError(f"lexicon file not found: {path}")
        generic: list[str] = []
        per_object: dict[str, list[str]] = {}
        target = generic
        for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                if section == "generic":
                    target = generic
                elif section.startswith("object:"):
                    name = section.split(":", 1)[1].strip()
                    target = per_object.setdefault(name, [])
                else:
                    raise InputError(f"{path}:{lineno}: unknown section {section!r}")
                continue
            target.append(line)
        return cls(generic=generic, per_object=per_object)


class PromptBank(nn.Module):
    """Learnable prompt parameters plus frozen token ids for one object."""

    def __init__(
        self,
        object_name: str,
        object_ids: list[int],
        manual_suffix_ids: list[list[int]],
        manual_suffix_texts: list[str],
        normal_prefixes: Tensor,
        learned_suffixes: Tensor,
        sot_id: int,
        eot_id: int,
    ):
        super().__init__()
        self.object_name = object_name
        self.object_ids = object_ids
        self.manual_suffix_ids = manual_suffix_ids
        self.manual_suffix_texts = manual_suffix_texts
        self.normal_prefixes = nn.Parameter(normal_prefixes)
        self.learned_suffixes = nn.Parameter(learned_suffixes)
        self.sot_id = sot_id
        self.eot_id = eot_id

    @property
    def prefix_count(self) -> int:
        return self.normal_prefixes.shape[0]

    @property
    def manual_count(self) -> int:
        return len(self.manual_suffix_ids)

    @property
    def learned_count(self) -> int:
        return self.learned_suffixes.shape[0]

    @property
    def num_learnable_blocks(self) -> int:
        return self.prefix_count + self.learned_count

    def prompt_counts(self) -> tuple[int, int, int]:
        """(normal, manual anomaly, learned anomaly) prompt cardinalities."""
        n, m, l = self.prefix_count, self.manual_count, self.learned_count
        return n, n * m, n * l

    def learnable_parameters(self) -> list[nn.Parameter]:
        return [self.normal_prefixes, self.learned_suffixes]


def build_bank(
    object_name: str,
    lexicon: SuffixLexicon,
    tokenizer: Tokenizer,
    context_length: int,
    embed_width: int,
    prefix_count: int = 1,
    learned_suffix_count: int = 4,
    prefix_length: int = 4,
    learned_suffix_length: int = 1,
    init_seed: int = 0,
) -> PromptBank:
    """Tokenize the frozen prompt parts and initialize learnable blocks.

    Learnable blocks draw from a zero-mean Gaussian (sigma 0.02) seeded by
    ``init_seed``; the same seed reproduces bit-identical parameters.
    """
    if prefix_count < 1 or learned_suffix_count < 1:
        raise InputError("prompt bank needs at least one prefix and one learned suffix")
    if prefix_length < 1 or learned_suffix_length < 1:
        raise InputError("prefix and suffix token lengths must be >= 1")
    object_ids = tokenizer.encode(object_name)
    if not object_ids:
        raise InputError(f"object name {object_name!r} tokenizes to nothing")
    suffix_texts = lexicon.for_object(object_name)
    manual_suffix_ids = [tokenizer.encode(text) for text in suffix_texts]
    for text, ids in zip(suffix_texts, manual_suffix_ids):
        if not ids:
            raise InputError(f"anomaly suffix {text!r} tokenizes to nothing")

    base = 2 + prefix_length + len(object_ids)  # sentinels + prefix + object
    overflows = [(f"normal prompt for {object_name!r}", base)]
    overflows += [
        (f"manual anomaly prompt {object_name + ' ' + text!r}", base + len(ids))
        for text, ids in zip(suffix_texts, manual_suffix_ids)
    ]
    overflows.append(
        (f"learned anomaly prompt for {object_name!r}", base + learned_suffix_length)
    )
    for prompt_name, needed in overflows:
        if needed > context_length:
            raise InputError(
                f"{prompt_name} needs {needed} tokens, exceeding the text "
                f"context length {context_length}"
            )

    generator = torch.Generator().manual_seed(init_seed)
    normal_prefixes = torch.empty(prefix_count, prefix_length, embed_width).normal_(
        mean=0.0, std=0.02, generator=generator
    )
    learned_suffixes = torch.empty(
        learned_suffix_count, learned_suffix_length, embed_width
    ).normal_(mean=0.0, std=0.02, generator=generator)
    return PromptBank(
        object_name=object_name,
        object_ids=object_ids,
        manual_suffix_ids=manual_suffix_ids,
        manual_suffix_texts=suffix_texts,
        normal_prefixes=normal_prefixes,
        learned_suffixes=learned_suffixes,
        sot_id=tokenizer.sot_id,
        eot_id=tokenizer.eot_id,
    )


@dataclass
class AssembledPrompt:
    prompt_id: str
    kind: PromptKind
    embeddings: Tensor  # (seq, width), graph-connected to bank parameters
    eot_index: int


def assemble_embeddings(
    bank: PromptBank, embed_fn: Callable[[list[int]], Tensor]
) -> list[AssembledPrompt]:
    """Build every prompt's embedding sequence from live bank parameters.

    ``embed_fn`` maps frozen token ids to embedding rows.  Learnable
    blocks are inserted as views of the bank parameters, so mutating a
    prefix changes every sequence assembled from it.
    """
    sot = embed_fn([bank.sot_id])
    eot = embed_fn([bank.eot_id])
    obj = embed_fn(bank.object_ids)
    manual_embeds = [embed_fn(ids) for ids in bank.manual_suffix_ids]

    prompts: list[AssembledPrompt] = []
    for i in range(bank.prefix_count):
        prefix = bank.normal_prefixes[i]
        head = torch.cat([sot, prefix, obj], dim=0)
        prompts.append(
            AssembledPrompt(
                prompt_id=f"normal[{i}]",
                kind=PromptKind.NORMAL,
                embeddings=torch.cat([head, eot], dim=0),
                eot_index=head.shape[0],
            )
        )
        for j, suffix in enumerate(manual_embeds):
            seq = torch.cat([head, suffix, eot], dim=0)
            prompts.append(
                AssembledPrompt(
                    prompt_id=f"manual[{i},{j}]",
                    kind=PromptKind.MANUAL_ANOMALY,
                    embeddings=seq,
                    eot_index=seq.shape[0] - 1,
                )
            )
        for j in range(bank.learned_count):
            seq = torch.cat([head, bank.learned_suffixes[j], eot], dim=0)
            prompts.append(
                AssembledPrompt(
                    prompt_id=f"learned[{i},{j}]",
                    kind=PromptKind.LEARNED_ANOMALY,
                    embeddings=seq,
                    eot_index=seq.shape[0] - 1,
                )
            )
    return prompts


@dataclass
class PromptFeature:
    prompt_id: str
    kind: PromptKind
    feature: Tensor  # (joint_dim,), unit-norm


@dataclass
class Prototypes:
    """Mean prompt features, raw and unit-normalized.

    The anomaly prototype is the unnormalized mean over all manual and
    learned anomaly features, normalized afterwards for use in margin
    and scoring computations.  Group means are None when a group is
    absent (e.g. a bank built without manual suffixes).
    """

    normal_raw: Tensor
    anomaly_raw: Tensor
    manual_raw: Tensor | None
    learned_raw: Tensor | None
    anomaly_features: Tensor  # (count, joint_dim)

    @staticmethod
    def _unit(vec: Tensor) -> Tensor:
        return vec / vec.norm()

    @property
    def normal(self) -> Tensor:
        return self._unit(self.normal_raw)

    @property
    def anomaly(self) -> Tensor:
        return self._unit(self.anomaly_raw)

    @property
    def manual(self) -> Tensor | None:
        return None if self.manual_raw is None else self._unit(self.manual_raw)

    @property
    def learned(self) -> Tensor | None:
        return None if self.learned_raw is None else self._unit(self.learned_raw)


def compute_prototypes(features: Sequence[PromptFeature]) -> Prototypes:
    """Group prompt features into prototypes; permutation-invariant."""
    by_kind: dict[PromptKind, list[Tensor]] = {k: [] for k in PromptKind}
    for item in features:
        by_kind[item.kind].append(item.feature)
    normals = by_kind[PromptKind.NORMAL]
    manuals = by_kind[PromptKind.MANUAL_ANOMALY]
    learned = by_kind[PromptKind.LEARNED_ANOMALY]
    if not normals:
        raise InputError("prototypes need at least one normal prompt feature")
    anomalies = manuals + learned
    if not anomalies:
        raise InputError(
            "prototypes need at least one anomaly prompt feature; "
            "a bank without anomaly prompts cannot drive prompt-guided scoring"
        )
    anomaly_stack = torch.stack(anomalies)
    return Prototypes(
        normal_raw=torch.stack(normals).mean(dim=0),
        anomaly_raw=anomaly_stack.mean(dim=0),
        manual_raw=torch.stack(manuals).mean(dim=0) if manuals else None,
        learned_raw=torch.stack(learned).mean(dim=0) if learned else None,
        anomaly_features=anomaly_stack,
    )


class ClipPromptEncoder:
    """Encode a bank's prompts through a frozen text tower.

    Sequences are zero-padded to the batch maximum; with the causal mask
    nothing after a prompt's end token can influence its feature.
    """

    def __init__(self, encoder):
        self._encoder = encoder

    def encode(self, bank: PromptBank) -> list[PromptFeature]:
        assembled = assemble_embeddings(bank, self._encoder.token_embeddings)
        max_len = max(p.embeddings.shape[0] for p in assembled)
        width = assembled[0].embeddings.shape[1]
        rows = []
        for prompt in assembled:
            pad = max_len - prompt.embeddings.shape[0]
            seq = prompt.embeddings
            if pad:
                seq = torch.cat([seq, seq.new_zeros(pad, width)], dim=0)
            rows.append(seq)
        batch = torch.stack(rows)
        eots = torch.tensor([p.eot_index for p in assembled], dtype=torch.long)
        feats = self._encoder.encode_text(batch, eots)
        return [
            PromptFeature(prompt_id=p.prompt_id, kind=p.kind, feature=feats[i])
            for i, p in enumerate(assembled)
        ]
