"""Session management over the agent pipeline: REPL and HTTP front ends.

Every turn is appended to a per-session JSONL log and flushed before the
reply is returned, so a crash mid-conversation never loses an answered
turn. Errors surface as ServiceError with a trace_id that also appears
in the log.
"""

from __future__ import annotations

import datetime as dt
import json
import sys
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, TextIO

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, PlainTextResponse

from .agents import (AgentPipeline, AgentResponse, AgentsError, UsageError,
                     VerificationError, route)
from .corpus import load_corpus
from .embedding import ReferenceEmbedder, index_documents, index_graph
from .explain import Explanation, _ranked_non_target, render_dot
from .kg import KnowledgeGraph, Provenance, load_edge_list, load_node_text, \
    merge_graphs
from .linkpred import load_model
from .llm import (AGENT_NAMES, AgentConfig, Gateway, GatewayError, MockRule,
                  MockScript, load_agent_configs, load_prompts)

_STATUS = {"bad_request": 400, "not_found": 404,
           "backend_unavailable": 503, "internal": 500}


class ServiceError(Exception):
    def __init__(self, code: str, message: str, trace_id: str,
                 status: Optional[int] = None):
        super().__init__(message)
        self.code = code
        self.trace_id = trace_id
        self.status = status if status is not None else _STATUS[code]


class MissingDataError(Exception):
    def __init__(self, path: str | Path):
        super().__init__(f"missing data file: {path}")
        self.path = str(path)


@dataclass
class Turn:
    user_input: str
    response: AgentResponse
    timestamp: float


@dataclass
class Session:
    session_id: str
    created_at: float
    turns: list[Turn] = field(default_factory=list)


def serialize_response(response: AgentResponse) -> dict:
    return {"answer_text": response.answer_text,
            "evidence": response.evidence,
            "agent_trace": [list(t) for t in response.agent_trace]}


def explanation_payload(explanation: Explanation) -> dict:
    head, tail = explanation.target
    edges = [{"head": str(a), "tail": str(b), "score": score}
             for (a, b), score in _ranked_non_target(explanation)]
    edges.append({"head": str(head), "tail": str(tail), "score": 1.0})
    return {"target": [str(head), str(tail)],
            "predicted_probability": explanation.predicted_probability,
            "edge_scores": edges,
            "top_k": [{"head": str(a), "tail": str(b), "score": score}
                      for (a, b), score in explanation.top_k],
            "dot": render_dot(explanation)}


def _default_ids() -> str:
    return uuid.uuid4().hex[:12]


class SessionManager:
    """Owns sessions, their turn locks, and the append-only JSONL logs."""

    def __init__(self, pipeline: AgentPipeline, log_dir: str | Path,
                 *, clock: Callable[[], float] = time.time,
                 id_factory: Callable[[], str] = _default_ids,
                 summary_dir: str | Path = "."):
        self.pipeline = pipeline
        self.log_dir = Path(log_dir)
        self.clock = clock
        self.id_factory = id_factory
        self.summary_dir = Path(summary_dir)
        self.sessions: dict[str, Session] = {}
        self._log_paths: dict[str, Path] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._io_lock = threading.Lock()

    def create_session(self) -> Session:
        created = self.clock()
        session_id = self.id_factory()
        stamp = dt.datetime.fromtimestamp(
            created, dt.timezone.utc).strftime("%Y%m%dT%H%M%SZ")
        self.log_dir.mkdir(parents=True, exist_ok=True)
        path = self.log_dir / f"session_{session_id}_{stamp}.jsonl"
        path.touch()
        session = Session(session_id=session_id, created_at=created)
        self.sessions[session_id] = session
        self._log_paths[session_id] = path
        self._locks[session_id] = threading.Lock()
        return session

    def log_text(self, session_id: str) -> str:
        path = self._log_paths.get(session_id)
        if path is None:
            raise self._error("not_found", f"unknown session {session_id}")
        return path.read_text(encoding="utf-8")

    def handle_message(self, session_id: str, text: str) -> AgentResponse:
        session = self.sessions.get(session_id)
        if session is None:
            raise self._error("not_found", f"unknown session {session_id}")
        lock = self._locks[session_id]
        if not lock.acquire(blocking=False):
            raise self._error("bad_request", "turn in progress",
                              session_id=session_id, status=409)
        try:
            transcript = (session_id,
                          [(t.user_input, t.response.answer_text)
                           for t in session.turns],
                          self.summary_dir)
            try:
                response = self.pipeline.answer(route(text),
                                                transcript=transcript)
            except UsageError as exc:
                raise self._error("bad_request", str(exc),
                                  session_id=session_id)
            except VerificationError as exc:
                raise self._error("internal", str(exc),
                                  session_id=session_id)
            except AgentsError as exc:
                raise self._error("bad_request", str(exc),
                                  session_id=session_id)
            except GatewayError as exc:
                code = exc.code if exc.code in _STATUS else "internal"
                raise self._error(code, str(exc), session_id=session_id)
            except ServiceError:
                raise
            except Exception as exc:  # keep the error contract airtight
                raise self._error("internal", f"{type(exc).__name__}: {exc}",
                                  session_id=session_id)
            timestamp = self.clock()
            record = {"kind": "turn", "session_id": session_id,
                      "turn": len(session.turns) + 1, "timestamp": timestamp,
                      "user_input": text,
                      "answer_text": response.answer_text,
                      "evidence": response.evidence,
                      "agent_trace": [list(t) for t in response.agent_trace]}
            self._append(session_id, record)
            session.turns.append(Turn(text, response, timestamp))
            return response
        finally:
            lock.release()

    def _error(self, code: str, message: str,
               session_id: Optional[str] = None,
               status: Optional[int] = None) -> ServiceError:
        trace_id = self.id_factory()
        if session_id in self._log_paths:
            self._append(session_id, {
                "kind": "error", "session_id": session_id,
                "timestamp": self.clock(), "trace_id": trace_id,
                "code": code, "message": message})
        return ServiceError(code, message, trace_id, status)

    def _append(self, session_id: str, record: dict) -> None:
        line = json.dumps(record, ensure_ascii=False,
                          separators=(",", ":")) + "\n"
        with self._io_lock:
            with open(self._log_paths[session_id], "a",
                      encoding="utf-8") as handle:
                handle.write(line)
                handle.flush()


# ------------------------------------------------------------------- REPL


def repl(manager: SessionManager, stdin: Optional[TextIO] = None,
         stdout: Optional[TextIO] = None) -> int:
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    session = manager.create_session()
    stdout.write(f"session {session.session_id}; keywords: query, predict, "
                 "search, summarize; 'exit' to quit\n")
    while True:
        stdout.write("> ")
        stdout.flush()
        line = stdin.readline()
        if not line:
            break
        text = line.strip()
        if not text:
            continue
        if text.lower() == "exit":
            break
        try:
            response = manager.handle_message(session.session_id, text)
        except ServiceError as exc:
            stdout.write(f"error [{exc.code}] {exc} "
                         f"(trace {exc.trace_id})\n")
            continue
        stdout.write(response.answer_text.rstrip("\n") + "\n")
        for item in response.evidence:
            stdout.write(f"[evidence {item.get('kind', '?')}] "
                         + json.dumps(item, ensure_ascii=False) + "\n")
    return 0


# ----------------------------------------------------------- construction


@dataclass
class ServiceState:
    pipeline: AgentPipeline
    manager: SessionManager


def _mock_scripts_from_json(data: dict) -> dict[str, MockScript]:
    scripts = {}
    for agent, spec in data.items():
        rules = tuple(MockRule(pattern, response)
                      for pattern, response in spec.get("rules", []))
        scripts[agent] = MockScript(rules=rules,
                                    default=spec.get("default", ""))
    return scripts


def build_state(config: dict, base_dir: str | Path) -> ServiceState:
    base = Path(base_dir)

    def need(raw: str | Path) -> Path:
        path = Path(raw)
        if not path.is_absolute():
            path = base / path
        if not path.exists():
            raise MissingDataError(path)
        return path

    def resolve(raw: str | Path) -> Path:
        path = Path(raw)
        return path if path.is_absolute() else base / path

    graph_cfg = config.get("graph", {})
    graph: Optional[KnowledgeGraph] = None
    for entry in graph_cfg.get("edge_lists", []):
        provenance = Provenance(entry.get("provenance", "knowledge_base"))
        part = load_edge_list(need(entry["path"]), provenance)
        graph = part if graph is None else merge_graphs(graph, part)
    if graph is None:
        graph = KnowledgeGraph()
    if graph_cfg.get("node_text"):
        graph = load_node_text(graph, need(graph_cfg["node_text"]))

    embedder = ReferenceEmbedder(d=int(config.get("embedding_dim", 256)))
    index = index_graph(graph, embedder) if graph.nodes else None

    corpus = doc_index = None
    if config.get("corpus"):
        corpus = load_corpus(need(config["corpus"]))
        doc_index = index_documents(corpus, embedder)

    model = None
    if config.get("checkpoint"):
        model = load_model(need(config["checkpoint"]))

    if config.get("agents"):
        agents = load_agent_configs(need(config["agents"]))
    else:
        agents = {name: AgentConfig(agent_name=name) for name in AGENT_NAMES}
    prompts = load_prompts(need(config["prompts"])) \
        if config.get("prompts") else {}
    scripts = {}
    if config.get("mock_scripts"):
        raw = json.loads(need(config["mock_scripts"])
                         .read_text(encoding="utf-8"))
        scripts = _mock_scripts_from_json(raw)
    gateway = Gateway(agents, prompts, mock_scripts=scripts,
                      key_file=config.get("key_file"))

    pipeline = AgentPipeline(
        graph, gateway, index=index, embedder=embedder, corpus=corpus,
        doc_index=doc_index, model=model,
        link_threshold=float(config.get("link_threshold", 0.35)),
        explain_k=int(config.get("explain_k", 10)),
        predict_n=int(config.get("predict_n", 5)),
        top_docs=int(config.get("top_docs", 4)),
        summary_budget=int(config.get("summary_budget", 500)))
    manager = SessionManager(
        pipeline, log_dir=resolve(config.get("log_dir", "log")),
        summary_dir=resolve(config.get("summary_dir", ".")))
    return ServiceState(pipeline=pipeline, manager=manager)


def repl_loop(config_path: str | Path, stdin: Optional[TextIO] = None,
              stdout: Optional[TextIO] = None,
              log_dir: Optional[str | Path] = None) -> int:
    out = stdout if stdout is not None else sys.stdout
    try:
        config = json.loads(Path(config_path).read_text(encoding="utf-8"))
        if log_dir is not None:
            config["log_dir"] = str(log_dir)
        state = build_state(config, Path(config_path).parent)
    except (OSError, ValueError, MissingDataError, KeyError) as exc:
        out.write(f"startup failed: {exc}\n")
        return 1
    return repl(state.manager, stdin, out)


# ------------------------------------------------------------------- HTTP


def create_app(manager: SessionManager) -> FastAPI:
    app = FastAPI(title="hypograph session service")

    @app.exception_handler(ServiceError)
    async def service_error(request: Request, exc: ServiceError):
        return JSONResponse(status_code=exc.status,
                            content={"code": exc.code, "message": str(exc),
                                     "trace_id": exc.trace_id})

    @app.exception_handler(RequestValidationError)
    async def invalid_request(request: Request,
                              exc: RequestValidationError):
        err = manager._error("bad_request", "invalid request body")
        return JSONResponse(status_code=400,
                            content={"code": err.code, "message": str(err),
                                     "trace_id": err.trace_id})

    @app.post("/api/sessions")
    def create_session():
        session = manager.create_session()
        return {"session_id": session.session_id}

    @app.post("/api/sessions/{session_id}/message")
    def post_message(session_id: str, payload: dict):
        text = payload.get("text")
        if not isinstance(text, str) or not text.strip():
            raise manager._error(
                "bad_request", "body must carry a non-empty 'text' field",
                session_id=session_id)
        response = manager.handle_message(session_id, text)
        return serialize_response(response)

    @app.get("/api/sessions/{session_id}/log")
    def get_log(session_id: str):
        return PlainTextResponse(manager.log_text(session_id),
                                 media_type="application/x-ndjson")

    @app.get("/api/predictions/{prediction_id}/explanation")
    def get_explanation(prediction_id: str):
        explanation = manager.pipeline.explanations.get(prediction_id)
        if explanation is None:
            raise manager._error("not_found",
                                 f"unknown prediction {prediction_id}")
        return explanation_payload(explanation)

    @app.get("/api/health")
    def health():
        return {"status": "ok"}

    return app


def serve_http(config_path: str | Path, port: int = 8080,
               log_dir: Optional[str | Path] = None) -> None:
    import uvicorn

    config = json.loads(Path(config_path).read_text(encoding="utf-8"))
    if log_dir is not None:
        config["log_dir"] = str(log_dir)
    state = build_state(config, Path(config_path).parent)
    uvicorn.run(create_app(state.manager), host="127.0.0.1", port=port)
