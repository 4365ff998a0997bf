"""Prompt grammar: ``[<identifier>] <field> brain MRI, slice <n>, <modality> contrast``."""

from __future__ import annotations

from .errors import PromptError
from .phantom import MAX_SLICE, FieldStrength, Modality, SliceMeta

IDENTIFIERS = ("sks0", "sks1", "sks2", "sks3")


def build_prompt(meta: SliceMeta, identifier: str | None = None) -> str:
    if identifier is not None and identifier not in IDENTIFIERS:
        raise PromptError(f"unregistered identifier {identifier!r}", identifier)
    text = f"{meta.field.value} brain MRI, slice {meta.slice_index}, {meta.modality.value} contrast"
    return f"{identifier} {text}" if identifier else text


def parse_prompt(text: str):
    """Inverse of :func:`build_prompt`.

    Returns ``(SliceMeta, identifier_or_None)``; raises :class:`PromptError`
    naming the first offending token.
    """
    words = text.replace(",", " , ").split()
    identifier = None
    if words and words[0] in IDENTIFIERS:
        identifier = words.pop(0)
    expected = ["<field>", "brain", "MRI", ",", "slice", "<n>", ",", "<modality>", "contrast"]
    field = modality = slice_index = None
    for word, slot in zip(words, expected):
        if slot == "<field>":
            try:
                field = FieldStrength(word)
            except ValueError:
                raise PromptError(f"unknown field strength {word!r}", word) from None
        elif slot == "<modality>":
            try:
                modality = Modality(word)
            except ValueError:
                raise PromptError(f"unknown modality {word!r}", word) from None
        elif slot == "<n>":
            if not word.isdigit() or str(int(word)) != word:
                raise PromptError(f"bad slice number {word!r}", word)
            slice_index = int(word)
            if not 1 <= slice_index <= MAX_SLICE:
                raise PromptError(f"slice {word} outside 1..{MAX_SLICE}", word)
        elif word != slot:
            raise PromptError(f"expected {slot!r}, got {word!r}", word)
    if len(words) != len(expected):
        bad = words[len(expected)] if len(words) > len(expected) else "<end>"
        raise PromptError(f"malformed prompt {text!r}: unexpected {bad!r}", bad)
    return SliceMeta(field, modality, slice_index), identifier
