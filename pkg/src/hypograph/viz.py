"""Figure rendering: explanation subgraphs and training reports as PNGs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")  # file output only; must be set before pyplot loads

import matplotlib.pyplot as plt
import networkx as nx

from .explain import Explanation
from .linkpred import MetricsReport, TrainResult


def explanation_figure(explanation: Explanation, path: str | Path) -> Path:
    """Draw the top-k explanation edges around the predicted link.

    Solid edge width tracks the mask score (same 0.5..5.0 scale as the
    DOT export); the predicted edge itself is dashed.
    """
    head, tail = explanation.target
    g = nx.Graph()
    for (a, b), score in explanation.top_k:
        if {a, b} == {head, tail}:
            continue
        g.add_edge(a, b, score=score)
    g.add_edge(head, tail, score=1.0)

    names = explanation.computation_subgraph.node_text
    labels = {node: names.get(node, node.local_id) for node in g.nodes}
    pos = nx.spring_layout(g, seed=7)

    fig, ax = plt.subplots(figsize=(8.0, 6.0))
    scored = [(a, b) for a, b in g.edges if {a, b} != {head, tail}]
    widths = [0.5 + 4.5 * g.edges[e]["score"] for e in scored]
    nx.draw_networkx_edges(g, pos, edgelist=scored, width=widths,
                           edge_color="#4a6fa5", ax=ax)
    nx.draw_networkx_edges(g, pos, edgelist=[(head, tail)], style="dashed",
                           width=1.5, edge_color="#b03a3a", ax=ax)
    nx.draw_networkx_nodes(g, pos, node_size=700, node_color="#e9eef6",
                           edgecolors="#39424e", ax=ax)
    nx.draw_networkx_labels(g, pos, labels=labels, font_size=7, ax=ax)
    edge_text = {(a, b): f"{g.edges[(a, b)]['score']:.3f}" for a, b in scored}
    nx.draw_networkx_edge_labels(g, pos, edge_labels=edge_text, font_size=6,
                                 ax=ax)
    ax.set_title(f"{head} -- {tail}   "
                 f"p={explanation.predicted_probability:.4f}", fontsize=9)
    ax.axis("off")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def _metric_rows(val: MetricsReport, test: MetricsReport) -> list[list[str]]:
    def fmt(value):
        return "n/a" if value is None else f"{value:.4f}"

    names = ["accuracy", "precision", "recall", "f1", "auroc", "auprc",
             "threshold"]
    return [[name, fmt(getattr(val, name)), fmt(getattr(test, name))]
            for name in names]


def training_figure(result: TrainResult, path: str | Path) -> Path:
    """Loss curve plus a val/test metric table, one PNG."""
    curve = result.test.loss_curve
    fig, (ax_loss, ax_table) = plt.subplots(
        1, 2, figsize=(10.0, 4.0), gridspec_kw={"width_ratios": [3, 2]})
    ax_loss.plot(range(1, len(curve) + 1), curve, color="#33567d")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("mean training loss")
    ax_loss.set_title(f"{len(curve)} epochs", fontsize=9)

    ax_table.axis("off")
    table = ax_table.table(cellText=_metric_rows(result.val, result.test),
                           colLabels=["metric", "val", "test"],
                           loc="center")
    table.auto_set_font_size(False)
    table.set_fontsize(8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
