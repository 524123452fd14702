"""Command line front end.

Report-producing paths (train, predict) write figures next to the
delimited outputs so a run's directory is self-documenting.
"""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import click

from .corpus import ArticleType, load_corpus
from .cypher import CypherError, execute, parse, validate
from .embedding import (ReferenceEmbedder, index_documents, index_graph,
                        load_index, save_index, search)
from .explain import ExplainConfig, ExplainError, explain_edge, \
    export_explanation
from .kg import (KgError, NodeId, Provenance, graph_summary, k_hop_filter,
                 load_edge_list, load_node_features, load_node_text,
                 merge_graphs, write_edge_list)
from .linkpred import (LinkpredError, TrainConfig, load_model,
                       predict_candidates, save_model, train)
from .session import repl_loop, serve_http
from .viz import explanation_figure, training_figure

_IN_PATH = click.Path(exists=True, dir_okay=False)


def _load_graph(edge_list: str, node_text: str | None = None,
                features: str | None = None):
    graph = load_edge_list(edge_list)
    if node_text:
        graph = load_node_text(graph, node_text)
    if features:
        graph = load_node_features(graph, features)
    return graph


@click.group()
def main():
    """Knowledge-graph hypothesis exploration tools."""
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")


# ------------------------------------------------------------------ kg


@main.group()
def kg():
    """Edge-list utilities: merge and k-hop filtering."""


@kg.command("filter")
@click.option("--k", type=int, default=2, show_default=True,
              help="hop radius around the seed nodes")
@click.option("--disease", required=True,
              help="comma-separated seed node ids")
@click.option("--input_file", "input_file", required=True, type=_IN_PATH)
@click.option("--output_file", "output_file", required=True,
              type=click.Path(dir_okay=False))
def kg_filter(k, disease, input_file, output_file):
    """Write the subgraph within K hops of the seed nodes."""
    graph = load_edge_list(input_file)
    seeds = [NodeId.parse(part.strip())
             for part in disease.split(",") if part.strip()]
    if not seeds:
        raise click.ClickException("--disease lists no node ids")
    unknown = [s for s in seeds if not graph.has_node(s)]
    if unknown:
        raise click.ClickException(
            "unknown seed node(s): " + ", ".join(str(s) for s in unknown))
    sub = k_hop_filter(graph, seeds, k=k)
    write_edge_list(sub, output_file)
    stats = graph_summary(sub)
    click.echo(f"wrote {output_file}: {stats.node_count} nodes, "
               f"{stats.edge_count} edges")


@kg.command("merge")
@click.argument("inputs", nargs=-1, required=True, type=_IN_PATH)
@click.option("--output_file", "output_file", required=True,
              type=click.Path(dir_okay=False))
@click.option("--provenance", default="",
              help="comma-separated provenance per input "
                   "(knowledge_base, text_mining, predicted); "
                   "defaults to knowledge_base")
def kg_merge(inputs, output_file, provenance):
    """Merge edge lists; the first file wins weight conflicts."""
    tags = [p.strip() for p in provenance.split(",") if p.strip()]
    if tags and len(tags) != len(inputs):
        raise click.ClickException(
            f"--provenance lists {len(tags)} values for {len(inputs)} inputs")
    try:
        provs = [Provenance(t) for t in tags] if tags \
            else [Provenance.KNOWLEDGE_BASE] * len(inputs)
    except ValueError as exc:
        raise click.ClickException(str(exc))
    merged = None
    for path, prov in zip(inputs, provs):
        part = load_edge_list(path, prov)
        merged = part if merged is None else merge_graphs(merged, part)
    write_edge_list(merged, output_file)
    stats = graph_summary(merged)
    click.echo(f"wrote {output_file}: {stats.node_count} nodes, "
               f"{stats.edge_count} edges")


# -------------------------------------------------------------- cypher


@main.command("cypher")
@click.option("--query", "query_text", default=None,
              help="query text (mutually exclusive with --file)")
@click.option("--file", "query_file", type=_IN_PATH, default=None)
@click.option("--graph", "graph_file", required=True, type=_IN_PATH,
              help="edge-list TSV to run against")
@click.option("--node-text", "node_text", type=_IN_PATH, default=None)
def cypher_cmd(query_text, query_file, graph_file, node_text):
    """Run one query; TSV on stdout, exit 2 on a rejected query."""
    if (query_text is None) == (query_file is None):
        raise click.ClickException("provide exactly one of --query or --file")
    text = query_text if query_text is not None \
        else Path(query_file).read_text(encoding="utf-8")
    diagnostics = validate(text)
    if diagnostics is not None:
        click.echo(str(diagnostics), err=True)
        sys.exit(2)
    graph = _load_graph(graph_file, node_text)
    try:
        table = execute(parse(text), graph)
    except CypherError as exc:
        click.echo(str(exc.diagnostics or exc), err=True)
        sys.exit(2)
    if table.type_mismatch_warnings:
        click.echo(f"warning: {table.type_mismatch_warnings} comparisons "
                   "mixed value types", err=True)
    click.echo(table.to_tsv(), nl=False)


# -------------------------------------------------------------- corpus


@main.group()
def corpus():
    """Document corpus inspection."""


@corpus.command("stats")
@click.argument("path", type=_IN_PATH)
def corpus_stats(path):
    """Per-article-type document counts."""
    docs = load_corpus(path)
    counts = docs.type_counts()
    click.echo(f"PMIDs\t{len(docs)}")
    click.echo("original contributions\t"
               f"{counts[ArticleType.ORIGINAL_CONTRIBUTION]}")
    click.echo(f"review articles\t{counts[ArticleType.REVIEW]}")
    click.echo("clinical case reports\t"
               f"{counts[ArticleType.CLINICAL_CASE_REPORT]}")
    click.echo(f"other\t{counts[ArticleType.OTHER]}")


# --------------------------------------------------------------- index


@main.group()
def index():
    """Build and query the embedding index."""


@index.command("build")
@click.option("--graph", "graph_file", type=_IN_PATH, default=None)
@click.option("--node-text", "node_text", type=_IN_PATH, default=None)
@click.option("--corpus", "corpus_file", type=_IN_PATH, default=None)
@click.option("--d", "dim", type=int, default=256, show_default=True)
@click.option("--output", "-o", "output", required=True,
              type=click.Path(dir_okay=False))
def index_build(graph_file, node_text, corpus_file, dim, output):
    """Embed a graph and/or corpus into one index file."""
    if graph_file is None and corpus_file is None:
        raise click.ClickException("need --graph and/or --corpus")
    embedder = ReferenceEmbedder(d=dim)
    idx = None
    if graph_file:
        idx = index_graph(_load_graph(graph_file, node_text), embedder)
    if corpus_file:
        idx = index_documents(load_corpus(corpus_file), embedder, index=idx)
    save_index(idx, output)
    click.echo(f"wrote {output}: {len(idx)} entries, d={idx.d}")


@index.command("search")
@click.option("--index", "-x", "index_file", required=True, type=_IN_PATH)
@click.option("--query", "-q", "query_text", required=True)
@click.option("--top", "-n", type=int, default=5, show_default=True)
def index_search(index_file, query_text, top):
    """Rank index entries by cosine similarity to the query text."""
    idx = load_index(index_file)
    embedder = ReferenceEmbedder(d=idx.d)
    for chk, score in search(idx, embedder.embed(query_text), top):
        click.echo(f"{chk.source}\t{chk.source_id}\t{score:.6f}")


# --------------------------------------------------------------- train


def _fmt_metric(value) -> str:
    return "n/a" if value is None else repr(value)


@main.command("train")
@click.option("-i", "graph_file", required=True, type=_IN_PATH,
              help="edge-list TSV")
@click.option("-o", "out_dir", required=True,
              type=click.Path(file_okay=False), help="report directory")
@click.option("--features", type=_IN_PATH, default=None,
              help="node feature TSV; default features derive from degrees")
@click.option("--epochs", type=int, default=1000, show_default=True)
@click.option("--hidden", type=int, default=64, show_default=True)
@click.option("--out-dim", type=int, default=32, show_default=True)
@click.option("--lr", type=float, default=0.01, show_default=True)
@click.option("--clip", type=float, default=5.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def train_cmd(graph_file, out_dir, features, epochs, hidden, out_dim, lr,
              clip, seed):
    """Train the link predictor; write checkpoint, metrics, and figure."""
    graph = _load_graph(graph_file, features=features)
    config = TrainConfig(hidden=hidden, out=out_dim, learning_rate=lr,
                         epochs=epochs, clip_norm=clip, seed=seed)
    try:
        result = train(graph, None, config)
    except LinkpredError as exc:
        raise click.ClickException(str(exc))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint = out / "link_model.bin"
    save_model(result.model, checkpoint)
    metrics_path = out / "metrics.tsv"
    with open(metrics_path, "w", encoding="utf-8") as handle:
        handle.write("metric\tval\ttest\n")
        for name in ("accuracy", "precision", "recall", "f1", "auroc",
                     "auprc", "threshold"):
            handle.write(f"{name}\t{_fmt_metric(getattr(result.val, name))}"
                         f"\t{_fmt_metric(getattr(result.test, name))}\n")
    figure_path = training_figure(result, out / "training_report.png")
    click.echo(f"wrote {checkpoint}")
    click.echo(f"wrote {metrics_path}")
    click.echo(f"wrote {figure_path}")
    click.echo(f"test f1 {result.test.f1:.4f}, "
               f"auroc {_fmt_metric(result.test.auroc)}")


# ------------------------------------------------------------- predict


def _read_pairs(path: Path) -> list[tuple[NodeId, NodeId]]:
    pairs = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8")
                                 .splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise click.ClickException(
                f"{path}:{lineno}: expected two tab-separated node ids")
        pairs.append((NodeId.parse(parts[0]), NodeId.parse(parts[1])))
    return pairs


@main.command("predict")
@click.option("-p", "pairs_file", required=True, type=_IN_PATH,
              help="candidate pairs, one 'head<TAB>tail' per line")
@click.option("-i", "graph_file", required=True, type=_IN_PATH,
              help="edge-list TSV")
@click.option("-o", "out_dir", required=True,
              type=click.Path(file_okay=False), help="report directory")
@click.option("-n", "top_n", type=int, default=5, show_default=True,
              help="ranked predictions to keep")
@click.option("-k", "top_k", type=int, default=10, show_default=True,
              help="explanation edges per prediction; 0 skips explanations")
@click.option("--checkpoint", "-c", type=_IN_PATH, default=None)
@click.option("--node-text", "node_text", type=_IN_PATH, default=None)
@click.option("--figures/--no-figures", default=True, show_default=True,
              help="render PNGs next to the TSV/DOT outputs")
def predict_cmd(pairs_file, graph_file, out_dir, top_n, top_k, checkpoint,
                node_text, figures):
    """Score candidate links and explain the accepted ones."""
    if checkpoint is None:
        raise click.ClickException(
            "no model checkpoint given; train one with 'hypograph train' "
            "and pass it via --checkpoint")
    model = load_model(checkpoint)
    graph = _load_graph(graph_file, node_text)
    pairs = _read_pairs(Path(pairs_file))
    if not pairs:
        raise click.ClickException(f"{pairs_file} lists no candidate pairs")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "prediction_results.csv"
    try:
        predictions = predict_candidates(model, graph, pairs, top_n,
                                         out_path=csv_path)
    except LinkpredError as exc:
        raise click.ClickException(str(exc))
    click.echo(f"wrote {csv_path}")
    for pred in predictions:
        click.echo(f"{pred.rank}. {pred.head} -- {pred.tail} "
                   f"p={pred.probability:.4f}")
        if top_k < 1:
            continue
        try:
            expl = explain_edge(model, graph, (pred.head, pred.tail),
                                k=top_k, config=ExplainConfig())
        except ExplainError as exc:
            click.echo(f"   explanation failed: {exc}", err=True)
            continue
        tsv_path, dot_path = export_explanation(expl, out)
        click.echo(f"   wrote {tsv_path}")
        click.echo(f"   wrote {dot_path}")
        if figures:
            png_path = explanation_figure(expl,
                                          tsv_path.with_suffix(".png"))
            click.echo(f"   wrote {png_path}")


# ------------------------------------------------------------- session


@main.command("session")
@click.option("--config", "config_path", required=True, type=_IN_PATH,
              help="JSON config naming data, agents, prompts, checkpoint")
@click.option("--serve", is_flag=True, default=False,
              help="run the HTTP service instead of the interactive prompt")
@click.option("--port", type=int, default=8080, show_default=True)
@click.option("--log-dir", "log_dir", default=None,
              help="session log directory (default ./log via config)")
def session_cmd(config_path, serve, port, log_dir):
    """Interactive exploration: REPL by default, HTTP with --serve."""
    if serve:
        serve_http(config_path, port=port, log_dir=log_dir)
        return
    sys.exit(repl_loop(config_path, log_dir=log_dir))


if __name__ == "__main__":
    main()
