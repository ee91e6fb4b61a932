"""Step-by-step introspection of a caption pass.

A trace replays a caption (teacher-forced on a gold example, or
free-running greedy) and records, per step and per decoder unit, the
controller's module weights, the noise-free soft weights, and every
attention distribution over regions.  The JSON document follows
docs/trace.schema.json; the SVG renderer draws the module weights as a
colored grid, one column per generated word.
"""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

from .decoder import BOS_ID, strip_sequence
from .tensor import no_grad

MODULE_ORDER = ("object", "attribute", "relation", "function")

MODULE_COLORS = {
    "object": "#d62728",
    "attribute": "#1f77b4",
    "relation": "#9467bd",
    "function": "#222222",
}


def _unit_dicts(traces):
    units = []
    for tr in traces:
        units.append({
            "weights": (None if tr.weights is None
                        else [float(w) for w in tr.weights.data[0]]),
            "soft": (None if tr.soft is None
                     else [float(w) for w in tr.soft.data[0]]),
            "alphas": {name: [float(a) for a in alpha.data[0]]
                       for name, alpha in sorted(tr.alphas.items())},
        })
    return units


def _doc_header(model, scene) -> dict:
    return {
        "scene_id": scene.scene_id,
        "strategy": model.cfg.strategy,
        "m_units": len(model.units),
        "modules": (list(MODULE_ORDER) if model.cfg.single_module is None
                    else [model.cfg.single_module]),
    }


def trace_example(model, corpus, synth, example) -> dict:
    """Teacher-forced replay of one gold caption."""
    scene = next(s for s in corpus.scenes if s.scene_id == example.scene_id)
    vocab = corpus.vocab
    ids = example.token_ids
    steps = []
    with no_grad():
        enc = model.encode(*synth.features(scene))
        states = model.init_state(1)
        for t in range(len(ids) - 1):
            dist, states, traces = model.step([ids[t]], enc, states)
            steps.append({
                "t": t,
                "input_token": vocab.tokens[ids[t]],
                "target_token": vocab.tokens[ids[t + 1]],
                "predicted_token": vocab.tokens[int(np.argmax(dist.data[0]))],
                "target_label": MODULE_ORDER[example.labels[t]],
                "units": _unit_dicts(traces),
            })
    doc = _doc_header(model, scene)
    doc.update({"kind": "teacher_forced", "slot": example.slot,
                "words": list(example.words), "steps": steps})
    return doc


def trace_generated(model, corpus, synth, scene, max_len: int = 16) -> dict:
    """Free-running greedy decode with the same bookkeeping."""
    vocab = corpus.vocab
    steps = []
    with no_grad():
        enc = model.encode(*synth.features(scene))
        states = model.init_state(1)
        tok = BOS_ID
        tokens = []
        for t in range(max_len):
            dist, states, traces = model.step([tok], enc, states)
            nxt = int(np.argmax(dist.data[0]))
            steps.append({
                "t": t,
                "input_token": vocab.tokens[tok],
                "target_token": None,
                "predicted_token": vocab.tokens[nxt],
                "target_label": None,
                "units": _unit_dicts(traces),
            })
            tokens.append(nxt)
            tok = nxt
            if nxt == 2:
                break
    doc = _doc_header(model, scene)
    doc.update({"kind": "generated", "slot": None,
                "words": vocab.decode(strip_sequence(tokens)), "steps": steps})
    return doc


# -- SVG ------------------------------------------------------------------

_CELL_W = 52
_CELL_H = 22
_LEFT = 86
_TOP = 34
_UNIT_GAP = 30


def _svg_text(x, y, s, size=11, anchor="middle", fill="#111111"):
    return (f'<text x="{x}" y="{y}" font-size="{size}" text-anchor="{anchor}" '
            f'fill="{fill}" font-family="sans-serif">{escape(s)}</text>')


def render_svg(doc: dict, all_units: bool = False) -> str:
    """Module-weight grid: one column per step, one row per module.

    Units without a controller (single-module traces) render their one
    module at full strength.  By default only the last unit, the one
    feeding the word head, is drawn.
    """
    steps = doc["steps"]
    modules = doc["modules"]
    unit_ids = (list(range(doc["m_units"])) if all_units
                else [doc["m_units"] - 1])
    n_cols = len(steps)
    rows_per_unit = len(modules)
    block_h = rows_per_unit * _CELL_H + _UNIT_GAP
    width = _LEFT + max(n_cols, 1) * _CELL_W + 20
    height = _TOP + len(unit_ids) * block_h + 30

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="#ffffff"/>',
        _svg_text(_LEFT, 16,
                  f'scene {doc["scene_id"]} [{doc["kind"]}, {doc["strategy"]}]',
                  size=12, anchor="start"),
    ]
    for block, unit_id in enumerate(unit_ids):
        top = _TOP + block * block_h
        parts.append(_svg_text(6, top + _CELL_H, f"unit {unit_id + 1}",
                               size=11, anchor="start"))
        for r, module in enumerate(modules):
            y = top + r * _CELL_H
            parts.append(_svg_text(_LEFT - 6, y + _CELL_H - 7, module,
                                   size=10, anchor="end",
                                   fill=MODULE_COLORS[module]))
            for c, step in enumerate(steps):
                unit = step["units"][unit_id]
                if unit["weights"] is None:
                    weight = 1.0
                else:
                    weight = unit["weights"][MODULE_ORDER.index(module)]
                opacity = 0.08 + 0.92 * max(0.0, min(1.0, weight))
                x = _LEFT + c * _CELL_W
                parts.append(
                    f'<rect x="{x}" y="{y}" width="{_CELL_W - 2}" '
                    f'height="{_CELL_H - 2}" fill="{MODULE_COLORS[module]}" '
                    f'fill-opacity="{opacity:.3f}"><title>'
                    f'{escape(module)} w={weight:.3f}</title></rect>')
        label_y = top + rows_per_unit * _CELL_H + 14
        for c, step in enumerate(steps):
            x = _LEFT + c * _CELL_W + (_CELL_W - 2) / 2
            parts.append(_svg_text(x, label_y, step["predicted_token"], size=10))
            if step["target_token"] is not None:
                parts.append(_svg_text(x, label_y + 13, step["target_token"],
                                       size=9, fill="#777777"))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
