# instructions.py
"""Template-based cutting instructions: generation, parsing and default resolution.

The grammar is closed: every sentence is a frame from
``templates/instructions.json`` filled with a style (or a plain verb), an
object, a cut-state phrase and a direction phrase. Because the grammar is
closed, parsing a generated sentence always recovers its specification.
"""

import json
import re
import string
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from config import CUT_STYLES, FOOD_KINDS, IMPLIED_SPLIT_PIECES, TEMPLATE_FILE
from errors import ConfigError, CoverageError, InstructionParseError, UnderspecifiedInstructionError
from trajectory_planner import CutState, CutTask

DIRECTIONS = ("left", "right", "top", "length", "none")
STATE_GROUPS = ("Ratio", "Middle", "Split", "SplitBoundary")
MIN_TEMPLATES_PER_STATE = 5
_FIELDS = {
    "frame": {"style", "verb", "object", "state", "direction"},
    "Ratio": {"num", "pct", "word"},
    "Middle": set(),
    "Split": {"k", "kword"},
    "SplitBoundary": {"ordinal", "k", "kword", "boundary"},
}


@dataclass(frozen=True)
class CutSpec:
    object_kind: str
    style: str | None = None
    state: CutState | None = None
    direction: str = "none"

    def __post_init__(self):
        if self.object_kind not in FOOD_KINDS:
            raise ConfigError(f"Unknown object: {self.object_kind}")
        if self.style is not None and self.style not in CUT_STYLES:
            raise ConfigError(f"Unknown cut style: {self.style}")
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"Unknown direction: {self.direction}")
        # a right-side datum and a right-hand direction phrase are the same fact
        if _is_sided(self.state):
            if self.direction == "right" and self.state.side != "right":
                object.__setattr__(self, "state", replace(self.state, side="right"))
            elif self.state.side == "right":
                object.__setattr__(self, "direction", "right")

    @property
    def resolved(self) -> bool:
        return self.style is not None and self.state is not None

    def to_task(self, **kwargs) -> CutTask:
        spec = resolve_defaults(self)
        return CutTask(style=spec.style, state=spec.state, object_kind=spec.object_kind, **kwargs)

    def to_dict(self) -> dict:
        return {
            "object_kind": self.object_kind,
            "style": self.style,
            "state": None if self.state is None else self.state.to_dict(),
            "direction": self.direction,
        }


def _is_sided(state: CutState | None) -> bool:
    return state is not None and (state.kind == "Ratio" or (state.kind == "Split" and state.boundary is not None))


def resolve_defaults(spec: CutSpec) -> CutSpec:
    """Missing style becomes Normal and a missing state becomes Middle."""
    if spec.style is None and spec.state is None:
        raise UnderspecifiedInstructionError("An instruction needs a cut style or a cut state")
    return replace(spec, style=spec.style or "Normal", state=spec.state or CutState.middle())


def _placeholders(pattern: str) -> set[str]:
    return {name for _, name, _, _ in string.Formatter().parse(pattern) if name}


def validate_templates(data: dict) -> list[str]:
    """Check a template document; returns a list of problems."""
    errors = []
    for key in ("frames", "style_phrases", "verbs", "states", "directions", "ratio_words", "count_words", "ordinals"):
        if key not in data:
            errors.append(f"Template file is missing '{key}'")
    if errors:
        return errors
    for frame in data["frames"]:
        unknown = _placeholders(frame["pattern"]) - _FIELDS["frame"]
        if unknown:
            errors.append(f"Frame '{frame['pattern']}' has unknown placeholders {sorted(unknown)}")
        if frame.get("style") not in ("named", "absent"):
            errors.append(f"Frame '{frame['pattern']}' needs style 'named' or 'absent'")
    missing_styles = set(CUT_STYLES) - set(data["style_phrases"])
    if missing_styles:
        errors.append(f"No style phrase for {sorted(missing_styles)}")
    for group in STATE_GROUPS:
        phrases = data["states"].get(group, [])
        if len(phrases) < MIN_TEMPLATES_PER_STATE:
            errors.append(f"State '{group}' has {len(phrases)} templates, needs at least {MIN_TEMPLATES_PER_STATE}")
        for entry in phrases:
            unknown = _placeholders(entry["pattern"]) - _FIELDS[group]
            if unknown:
                errors.append(f"State phrase '{entry['pattern']}' has unknown placeholders {sorted(unknown)}")
    if set(data["directions"]) != set(DIRECTIONS):
        errors.append(f"Directions must be exactly {list(DIRECTIONS)}")
    for words in data["ratio_words"].values():
        if not words:
            errors.append("Every ratio word entry needs at least one phrase")
    return errors


@dataclass(frozen=True, eq=False)
class TemplateSet:
    data: dict

    @classmethod
    def from_dict(cls, data: dict) -> "TemplateSet":
        errors = validate_templates(data)
        if errors:
            raise ConfigError("; ".join(errors))
        return cls(data)

    @classmethod
    def load(cls, path=None) -> "TemplateSet":
        path = Path(path) if path is not None else Path(__file__).resolve().parent / TEMPLATE_FILE
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    @property
    def ratio_words(self) -> dict[float, list[str]]:
        return {round(float(r), 9): words for r, words in self.data["ratio_words"].items()}

    @property
    def count_words(self) -> dict[int, str]:
        return {int(k): w for k, w in self.data["count_words"].items()}

    @property
    def ordinals(self) -> list[str]:
        return self.data["ordinals"]


@lru_cache(maxsize=1)
def default_templates() -> TemplateSet:
    return TemplateSet.load()


def _number(x: float) -> str:
    return np.format_float_positional(x, trim="-")


def _state_group(state: CutState) -> str:
    if state.kind == "Split" and state.boundary is not None:
        return "SplitBoundary"
    return state.kind


def state_phrases(state: CutState, templates: TemplateSet) -> list[str]:
    """Every phrasing of ``state`` the templates allow, lexical variants included."""
    out = []
    for entry in templates.data["states"][_state_group(state)]:
        pattern = entry["pattern"]
        if "ratio" in entry and round(entry["ratio"], 9) != state.ratio:
            continue
        if "k" in entry and entry["k"] != state.k:
            continue
        fields = _placeholders(pattern)
        values = {}
        if state.kind == "Ratio":
            values = {"num": [_number(state.ratio)], "pct": [_number(round(state.ratio * 100.0, 7)) + "%"]}
            values["word"] = templates.ratio_words.get(state.ratio, [])
        elif state.kind == "Split":
            values = {"k": [str(state.k)], "kword": [templates.count_words.get(state.k)] if state.k in templates.count_words else []}
            if state.boundary is not None:
                values["boundary"] = [str(state.boundary)]
                ordinals = templates.ordinals
                values["ordinal"] = [ordinals[state.boundary - 1]] if state.boundary <= len(ordinals) else []
        if any(not values.get(name) for name in fields):
            continue
        variants = [{}]
        for name in sorted(fields):
            variants = [dict(v, **{name: choice}) for v in variants for choice in values[name]]
        out.extend(pattern.format(**v) for v in variants)
    return out


def _sentences(spec: CutSpec, templates: TemplateSet) -> list[str]:
    data = templates.data
    phrases = state_phrases(spec.state, templates)
    directions = data["directions"][spec.direction]
    out = []
    for frame in data["frames"]:
        if frame["style"] == "named":
            heads = [("style", data["style_phrases"][spec.style])]
        elif spec.style == "Normal":
            heads = [("verb", verb) for verb in data["verbs"]]
        else:
            continue
        for key, head in heads:
            for phrase in phrases:
                # a plain verb with no state phrase would leave both unspecified
                if key == "verb" and not phrase:
                    continue
                for direction in directions:
                    out.append(
                        frame["pattern"].format(
                            **{key: head},
                            object=spec.object_kind,
                            state=f" {phrase}" if phrase else "",
                            direction=f" {direction}" if direction else "",
                        )
                    )
    return out


def enumerate_instructions(spec: CutSpec, templates: TemplateSet | None = None) -> list[str]:
    """All sentences the grammar produces for a resolved ``spec``."""
    templates = templates or default_templates()
    spec = resolve_defaults(spec)
    sentences = _sentences(spec, templates)
    if not sentences:
        raise CoverageError(f"No template covers {spec.style} / {spec.state.label}")
    return sentences


def generate_instruction(spec: CutSpec, rng=None, templates: TemplateSet | None = None) -> str:
    rng = np.random.default_rng(rng)
    sentences = enumerate_instructions(spec, templates)
    return sentences[int(rng.integers(len(sentences)))]


def _alternation(options) -> str:
    return "|".join(re.escape(o) for o in sorted(options, key=len, reverse=True))


@lru_cache(maxsize=8)
def _state_regexes(templates: TemplateSet) -> list[tuple[str, dict, re.Pattern]]:
    groups = {
        "num": r"(?P<num>\d+(?:\.\d+)?)",
        "pct": r"(?P<pct>\d+(?:\.\d+)?)%",
        "word": f"(?P<word>{_alternation(w for words in templates.ratio_words.values() for w in words)})",
        "k": r"(?P<k>\d+)",
        "kword": f"(?P<kword>{_alternation(templates.count_words.values())})",
        "ordinal": f"(?P<ordinal>{_alternation(templates.ordinals)})",
        "boundary": r"(?P<boundary>\d+)",
    }
    compiled = []
    for group in STATE_GROUPS:
        for entry in templates.data["states"][group]:
            literal = [re.escape(text) + (groups[name] if name else "") for text, name, _, _ in string.Formatter().parse(entry["pattern"])]
            compiled.append((group, entry, re.compile("".join(literal))))
    return compiled


def _parse_state(text: str, templates: TemplateSet) -> CutState | None:
    if not text:
        return None
    for group, entry, regex in _state_regexes(templates):
        match = regex.fullmatch(text)
        if match is None:
            continue
        found = match.groupdict()
        if group == "Ratio":
            if "ratio" in entry:
                return CutState.ratio_cut(entry["ratio"])
            if found.get("num"):
                return CutState.ratio_cut(float(found["num"]))
            if found.get("pct"):
                return CutState.ratio_cut(float(found["pct"]) / 100.0)
            word = found["word"]
            return CutState.ratio_cut(next(r for r, words in templates.ratio_words.items() if word in words))
        if group == "Middle":
            return CutState.middle()
        k = entry.get("k")
        if found.get("k"):
            k = int(found["k"])
        elif found.get("kword"):
            k = next(n for n, w in templates.count_words.items() if w == found["kword"])
        if group == "Split":
            return CutState.split(k)
        k = k or IMPLIED_SPLIT_PIECES
        boundary = int(found["boundary"]) if found.get("boundary") else templates.ordinals.index(found["ordinal"]) + 1
        return CutState.split(k, boundary=boundary)
    return None


def parse_instruction(text: str, templates: TemplateSet | None = None) -> CutSpec:
    """Recover the resolved specification of an instruction sentence."""
    templates = templates or default_templates()
    data = templates.data
    body = text.strip()
    if body.endswith("."):
        body = body[:-1]
    if not body:
        raise InstructionParseError("Empty instruction", (0, 0))

    style = None
    heads = [(phrase, name) for name, phrase in data["style_phrases"].items()] + [(verb, None) for verb in data["verbs"]]
    for phrase, name in sorted(heads, key=lambda h: len(h[0]), reverse=True):
        if body.startswith(phrase + " the "):
            style, rest, offset = name, body[len(phrase) + 5:], len(phrase) + 5
            break
    else:
        end = body.find(" ") if " " in body else len(body)
        raise InstructionParseError(f"Unrecognized cut style or verb '{body[:end]}'", (0, end))

    object_kind = next((kind for kind in FOOD_KINDS if rest == kind or rest.startswith(kind + " ")), None)
    if object_kind is None:
        end = rest.find(" ") if " " in rest else len(rest)
        raise InstructionParseError(f"Unrecognized object '{rest[:end]}'", (offset, offset + end))
    rest = rest[len(object_kind) + 1:]
    offset += len(object_kind) + 1

    candidates = sorted(
        ((phrase, direction) for direction, phrases in data["directions"].items() for phrase in phrases),
        key=lambda c: len(c[0]),
        reverse=True,
    )
    for phrase, direction in candidates:
        if phrase and not (rest == phrase or rest.endswith(" " + phrase)):
            continue
        state_text = rest[: len(rest) - len(phrase)].rstrip() if phrase else rest
        state = _parse_state(state_text, templates)
        if state is None and state_text:
            continue
        try:
            return resolve_defaults(CutSpec(object_kind, style, state, direction))
        except UnderspecifiedInstructionError as exc:
            raise InstructionParseError(str(exc), (offset, offset + len(rest))) from exc
    raise InstructionParseError(f"Unrecognized cut state '{rest}'", (offset, offset + len(rest)))


def coverage_report(templates: TemplateSet | None = None, states=None) -> dict[tuple[str, str], int]:
    """Number of sentences available for every style and cut-state pair."""
    templates = templates or default_templates()
    states = states or [CutState.ratio_cut(0.3), CutState.middle(), CutState.split(3)]
    return {
        (style, state.label): len(_sentences(CutSpec(FOOD_KINDS[0], style, state, "none"), templates))
        for style in CUT_STYLES
        for state in states
    }
