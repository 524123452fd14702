"""Session layer: manager locking and logs, REPL, HTTP contract."""

import io
import itertools
import json
import threading
from pathlib import Path

import pytest
from fastapi.testclient import TestClient

from hypograph.agents import AgentPipeline, AgentResponse
from hypograph.corpus import load_corpus
from hypograph.cypher import execute, parse
from hypograph.embedding import ReferenceEmbedder, index_documents, index_graph
from hypograph.kg import Provenance, load_edge_list, load_node_text
from hypograph.linkpred import TrainConfig, save_model, train
from hypograph.llm import AGENT_NAMES, AgentConfig, Gateway, MockScript
from hypograph.session import (
    MissingDataError,
    ServiceError,
    SessionManager,
    build_state,
    create_app,
    repl,
    repl_loop,
)

DATA = Path(__file__).parent / "data"

VALID_QUERY = ("MATCH (d:DrugBank_Compound)-[:`-treats->`]->(x) "
               "RETURN d.name AS Drug, x.name AS Disease ORDER BY Drug")

SCRIPTS = {
    "cypher_query": MockScript(default=VALID_QUERY),
    "query_verification": MockScript(default=VALID_QUERY),
    "text_evaluator": MockScript(default="relevant - fixture study"),
    "reasoning": MockScript(default="Hello from the reasoning agent."),
    "summarizer": MockScript(default="The session explored fixture data."),
    "prediction_interpreter": MockScript(default="A class effect is plausible."),
}


@pytest.fixture(scope="module")
def named_graph():
    g = load_edge_list(DATA / "fixture_kg.tsv", Provenance.KNOWLEDGE_BASE)
    return load_node_text(g, DATA / "fixture_node_text.tsv")


@pytest.fixture(scope="module")
def embedder():
    return ReferenceEmbedder(d=256)


@pytest.fixture(scope="module")
def docs():
    return load_corpus(DATA / "corpus_fixture.json")


@pytest.fixture(scope="module")
def model(named_graph):
    return train(named_graph, None, TrainConfig(epochs=200, seed=0)).model


def counter_clock(start=1_700_000_000.0):
    state = {"t": start}

    def clock():
        state["t"] += 1.0
        return state["t"]

    return clock


def make_ids():
    counter = itertools.count(1)
    return lambda: f"s{next(counter):04d}"


def make_manager(tmp_path, named_graph, embedder, docs=None, model=None,
                 scripts=SCRIPTS):
    clock = counter_clock()
    agents = {name: AgentConfig(agent_name=name) for name in AGENT_NAMES}
    gateway = Gateway(agents, mock_scripts=scripts)
    pipeline = AgentPipeline(
        named_graph, gateway, index=index_graph(named_graph, embedder),
        embedder=embedder, corpus=docs,
        doc_index=index_documents(docs, embedder) if docs else None,
        model=model, clock=clock)
    return SessionManager(pipeline, log_dir=tmp_path / "log", clock=clock,
                          id_factory=make_ids(),
                          summary_dir=tmp_path / "summaries")


class TestSessionManager:
    def test_create_session(self, tmp_path, named_graph, embedder):
        manager = make_manager(tmp_path, named_graph, embedder)
        session = manager.create_session()
        assert session.session_id == "s0001"
        assert session.session_id in manager.sessions
        assert manager.log_text(session.session_id) == ""
        log_files = list((tmp_path / "log").glob("session_s0001_*.jsonl"))
        assert len(log_files) == 1

    def test_log_written_before_reply(self, tmp_path, named_graph, embedder):
        manager = make_manager(tmp_path, named_graph, embedder)
        sid = manager.create_session().session_id
        resp = manager.handle_message(sid, "hello there")
        assert resp.answer_text == "Hello from the reasoning agent."
        lines = manager.log_text(sid).splitlines()
        assert len(lines) == 1
        record = json.loads(lines[0])
        assert record["kind"] == "turn"
        assert record["turn"] == 1
        assert record["user_input"] == "hello there"
        assert record["answer_text"] == resp.answer_text
        assert record["agent_trace"] == [list(t) for t in resp.agent_trace]

    def test_unknown_session(self, tmp_path, named_graph, embedder):
        manager = make_manager(tmp_path, named_graph, embedder)
        with pytest.raises(ServiceError) as err:
            manager.handle_message("ghost", "hi")
        assert err.value.code == "not_found"
        assert err.value.status == 404

    def test_usage_error_logged_with_trace_id(self, tmp_path, named_graph,
                                              embedder):
        manager = make_manager(tmp_path, named_graph, embedder)
        sid = manager.create_session().session_id
        with pytest.raises(ServiceError) as err:
            manager.handle_message(sid, "query")
        assert err.value.code == "bad_request"
        assert err.value.status == 400
        trace_id = err.value.trace_id
        assert trace_id
        records = [json.loads(l) for l in manager.log_text(sid).splitlines()]
        assert any(r.get("trace_id") == trace_id for r in records)

    def test_busy_session_conflict(self, tmp_path, named_graph, embedder):
        manager = make_manager(tmp_path, named_graph, embedder)
        sid = manager.create_session().session_id
        started, release = threading.Event(), threading.Event()

        def slow_answer(command, transcript=None):
            started.set()
            release.wait(timeout=10)
            return AgentResponse("slow", [], [])

        manager.pipeline.answer = slow_answer
        worker = threading.Thread(
            target=manager.handle_message, args=(sid, "hello there"))
        worker.start()
        assert started.wait(timeout=10)
        with pytest.raises(ServiceError) as err:
            manager.handle_message(sid, "second")
        assert err.value.status == 409
        assert err.value.code == "bad_request"
        assert "progress" in str(err.value)
        release.set()
        worker.join(timeout=10)
        assert manager.handle_message(sid, "third").answer_text == "slow"

    def test_timestamps_non_decreasing(self, tmp_path, named_graph, embedder):
        manager = make_manager(tmp_path, named_graph, embedder)
        sid = manager.create_session().session_id
        manager.handle_message(sid, "hello there")
        manager.handle_message(sid, "again please")
        stamps = [t.timestamp for t in manager.sessions[sid].turns]
        assert stamps == sorted(stamps)

    def test_summarize_writes_file(self, tmp_path, named_graph, embedder):
        manager = make_manager(tmp_path, named_graph, embedder)
        sid = manager.create_session().session_id
        manager.handle_message(sid, "hello there")
        resp = manager.handle_message(sid, "summarize")
        assert resp.answer_text == "The session explored fixture data."
        files = [e for e in resp.evidence if e["kind"] == "summary_file"]
        assert len(files) == 1
        path = manager.summary_dir / files[0]["path"]
        assert path.exists()
        assert path.read_text(encoding="utf-8") == resp.answer_text

    def test_summarize_before_any_turn(self, tmp_path, named_graph, embedder):
        manager = make_manager(tmp_path, named_graph, embedder)
        sid = manager.create_session().session_id
        with pytest.raises(ServiceError) as err:
            manager.handle_message(sid, "summarize")
        assert err.value.code == "bad_request"


class TestRepl:
    def run(self, manager, text):
        out = io.StringIO()
        code = repl(manager, stdin=io.StringIO(text), stdout=out)
        return code, out.getvalue()

    def test_exit_creates_empty_log(self, tmp_path, named_graph, embedder):
        manager = make_manager(tmp_path, named_graph, embedder)
        code, _ = self.run(manager, "exit\n")
        assert code == 0
        assert len(manager.sessions) == 1
        sid = next(iter(manager.sessions))
        assert manager.log_text(sid) == ""

    def test_eof_clean_exit(self, tmp_path, named_graph, embedder):
        manager = make_manager(tmp_path, named_graph, embedder)
        code, _ = self.run(manager, "")
        assert code == 0

    def test_chat_turn_printed(self, tmp_path, named_graph, embedder):
        manager = make_manager(tmp_path, named_graph, embedder)
        code, out = self.run(manager, "hello there\nexit\n")
        assert code == 0
        assert "Hello from the reasoning agent." in out

    def test_usage_error_continues(self, tmp_path, named_graph, embedder):
        manager = make_manager(tmp_path, named_graph, embedder)
        code, out = self.run(manager, "query\nhello there\nexit\n")
        assert code == 0
        assert "usage" in out
        assert "Hello from the reasoning agent." in out

    def test_query_turn_prints_evidence(self, tmp_path, named_graph,
                                        embedder):
        manager = make_manager(tmp_path, named_graph, embedder)
        code, out = self.run(manager,
                             "query What drugs treat diseases?\nexit\n")
        assert code == 0
        assert "cypher command used to access this information" in out
        assert "[evidence cypher]" in out

    def test_agent_failure_reported_session_continues(self, tmp_path,
                                                      named_graph, embedder):
        scripts = dict(SCRIPTS)
        scripts.pop("reasoning")  # chat turns now fail at the gateway
        manager = make_manager(tmp_path, named_graph, embedder,
                               scripts=scripts)
        code, out = self.run(
            manager, "hello there\nquery What drugs treat diseases?\nexit\n")
        assert code == 0
        assert "error [" in out
        assert "cypher command used to access this information" in out


class TestBuildState:
    def write_config(self, tmp_path, model, overrides=None):
        checkpoint = tmp_path / "model.bin"
        save_model(model, checkpoint)
        scripts_path = tmp_path / "mock_scripts.json"
        scripts_path.write_text(json.dumps({
            "reasoning": {"rules": [["ping", "pong"]], "default": "chat"},
            "cypher_query": {"default": VALID_QUERY},
            "query_verification": {"default": VALID_QUERY},
            "text_evaluator": {"default": "relevant - ok"},
            "summarizer": {"default": "done"},
            "prediction_interpreter": {"default": "plausible"},
        }))
        agents_path = tmp_path / "agents.json"
        agents_path.write_text(json.dumps(
            {name: {"backend": "mock"} for name in sorted(AGENT_NAMES)}))
        config = {
            "graph": {
                "edge_lists": [{"path": str(DATA / "fixture_kg.tsv"),
                                "provenance": "knowledge_base"}],
                "node_text": str(DATA / "fixture_node_text.tsv"),
            },
            "corpus": str(DATA / "corpus_fixture.json"),
            "checkpoint": str(checkpoint),
            "agents": str(agents_path),
            "mock_scripts": str(scripts_path),
            "log_dir": str(tmp_path / "log"),
            "summary_dir": str(tmp_path),
        }
        config.update(overrides or {})
        path = tmp_path / "config.json"
        path.write_text(json.dumps(config))
        return path

    def test_full_state_round_trip(self, tmp_path, model):
        config_path = self.write_config(tmp_path, model)
        state = build_state(json.loads(config_path.read_text()),
                            config_path.parent)
        assert len(state.pipeline.graph.nodes) == 23
        assert state.pipeline.model is not None
        sid = state.manager.create_session().session_id
        resp = state.manager.handle_message(sid, "ping please")
        assert resp.answer_text == "pong"

    def test_missing_graph_file(self, tmp_path, model):
        config_path = self.write_config(
            tmp_path, model,
            {"graph": {"edge_lists": [{"path": "no_such.tsv"}]}})
        with pytest.raises(MissingDataError, match="no_such.tsv"):
            build_state(json.loads(config_path.read_text()),
                        config_path.parent)

    def test_repl_loop_exit_1_on_missing_file(self, tmp_path, model):
        config_path = self.write_config(
            tmp_path, model,
            {"corpus": str(tmp_path / "absent_corpus.json")})
        out = io.StringIO()
        code = repl_loop(config_path, stdin=io.StringIO("exit\n"), stdout=out)
        assert code == 1
        assert "absent_corpus.json" in out.getvalue()

    def test_repl_loop_runs_turn(self, tmp_path, model):
        config_path = self.write_config(tmp_path, model)
        out = io.StringIO()
        code = repl_loop(config_path,
                         stdin=io.StringIO("ping please\nexit\n"), stdout=out)
        assert code == 0
        assert "pong" in out.getvalue()


class TestHttpService:
    def make_client(self, tmp_path, named_graph, embedder, docs=None,
                    model=None):
        manager = make_manager(tmp_path, named_graph, embedder, docs=docs,
                               model=model)
        app = create_app(manager)
        return TestClient(app, raise_server_exceptions=False), manager

    def test_health(self, tmp_path, named_graph, embedder):
        client, _ = self.make_client(tmp_path, named_graph, embedder)
        response = client.get("/api/health")
        assert response.status_code == 200
        assert response.json() == {"status": "ok"}

    def test_lifecycle(self, tmp_path, named_graph, embedder):
        client, _ = self.make_client(tmp_path, named_graph, embedder)
        sid = client.post("/api/sessions").json()["session_id"]
        reply = client.post(f"/api/sessions/{sid}/message",
                            json={"text": "query What drugs treat diseases?"})
        assert reply.status_code == 200
        body = reply.json()
        assert "cypher command used to access this information" \
            in body["answer_text"]
        assert body["evidence"][0]["kind"] == "cypher"
        log = client.get(f"/api/sessions/{sid}/log")
        assert log.status_code == 200
        lines = [json.loads(l) for l in log.text.splitlines()]
        assert len(lines) == 1
        assert lines[0]["agent_trace"] == body["agent_trace"]

    def test_unknown_session_shape(self, tmp_path, named_graph, embedder):
        client, _ = self.make_client(tmp_path, named_graph, embedder)
        response = client.post("/api/sessions/ghost/message",
                               json={"text": "hi"})
        assert response.status_code == 404
        body = response.json()
        assert body["code"] == "not_found"
        assert body["trace_id"]
        assert "ghost" in body["message"]

    def test_bad_payload_shape(self, tmp_path, named_graph, embedder):
        client, _ = self.make_client(tmp_path, named_graph, embedder)
        sid = client.post("/api/sessions").json()["session_id"]
        response = client.post(f"/api/sessions/{sid}/message",
                               json={"text": "query"})
        assert response.status_code == 400
        assert response.json()["code"] == "bad_request"

    def test_missing_text_field(self, tmp_path, named_graph, embedder):
        client, _ = self.make_client(tmp_path, named_graph, embedder)
        sid = client.post("/api/sessions").json()["session_id"]
        response = client.post(f"/api/sessions/{sid}/message", json={})
        assert response.status_code == 400
        assert response.json()["code"] == "bad_request"

    def test_unknown_session_log(self, tmp_path, named_graph, embedder):
        client, _ = self.make_client(tmp_path, named_graph, embedder)
        response = client.get("/api/sessions/ghost/log")
        assert response.status_code == 404

    def test_explanation_endpoint(self, tmp_path, named_graph, embedder,
                                  model):
        client, manager = self.make_client(tmp_path, named_graph, embedder,
                                           model=model)
        sid = client.post("/api/sessions").json()["session_id"]
        reply = client.post(
            f"/api/sessions/{sid}/message",
            json={"text":
                  "predict Beta blocking agents for Dilated Cardiomyopathy"})
        assert reply.status_code == 200
        preds = [e for e in reply.json()["evidence"]
                 if e["kind"] == "prediction"]
        pid = preds[0]["prediction_id"]
        expl = client.get(f"/api/predictions/{pid}/explanation")
        assert expl.status_code == 200
        body = expl.json()
        assert body["target"] == [preds[0]["head"], preds[0]["tail"]]
        assert 0.0 < body["predicted_probability"] < 1.0
        assert body["edge_scores"][-1]["score"] == 1.0
        assert body["dot"].startswith("graph explanation {")
        missing = client.get("/api/predictions/nope/explanation")
        assert missing.status_code == 404

    def test_repl_and_http_payloads_identical(self, tmp_path, named_graph,
                                              embedder):
        direct = make_manager(tmp_path / "a", named_graph, embedder)
        sid = direct.create_session().session_id
        resp = direct.handle_message(sid, "query What drugs treat diseases?")
        direct_payload = {"answer_text": resp.answer_text,
                          "evidence": resp.evidence,
                          "agent_trace": [list(t) for t in resp.agent_trace]}

        client, _ = self.make_client(tmp_path / "b", named_graph, embedder)
        hsid = client.post("/api/sessions").json()["session_id"]
        body = client.post(f"/api/sessions/{hsid}/message",
                           json={"text": "query What drugs treat diseases?"}
                           ).json()
        assert json.dumps(body, sort_keys=True) \
            == json.dumps(direct_payload, sort_keys=True)


class TestDeterministicReplay:
    TURNS = ["query What drugs treat diseases?",
             "predict Beta blocking agents for Dilated Cardiomyopathy",
             "search arrhythmias after myocardial infarction propranolol",
             "summarize"]

    def run_session(self, tmp_path, named_graph, embedder, docs, model):
        manager = make_manager(tmp_path, named_graph, embedder, docs=docs,
                               model=model)
        sid = manager.create_session().session_id
        for text in self.TURNS:
            manager.handle_message(sid, text)
        return manager.log_text(sid)

    def test_two_runs_byte_identical(self, tmp_path, named_graph, embedder,
                                     docs, model):
        first = self.run_session(tmp_path / "r1", named_graph, embedder,
                                 docs, model)
        second = self.run_session(tmp_path / "r2", named_graph, embedder,
                                  docs, model)
        assert first == second
        assert len(first.splitlines()) == len(self.TURNS)

    def test_matches_committed_golden(self, tmp_path, named_graph, embedder,
                                      docs, model):
        log = self.run_session(tmp_path, named_graph, embedder, docs, model)
        golden = (DATA / "golden_session.jsonl").read_text(encoding="utf-8")
        assert log == golden

    def test_query_evidence_reexecutable(self, tmp_path, named_graph,
                                         embedder, docs, model):
        log = self.run_session(tmp_path / "r3", named_graph, embedder, docs,
                               model)
        records = [json.loads(l) for l in log.splitlines()]
        cypher_items = [e for r in records for e in r["evidence"]
                        if e["kind"] == "cypher"]
        assert cypher_items
        for item in cypher_items:
            table = execute(parse(item["query"]), named_graph)
            assert table.to_tsv() == item["table_tsv"]
