import json
import threading

import pytest
import requests

import corpus
from finq.cli import main
from finq.engine import Engine
from finq.enrich import LocalEmbeddingProvider, ProviderUnavailable
from finq.retrieval import without_timings
from finq.server import FinqServer


@pytest.fixture
def service(corpus_config):
    engine = Engine.from_config_file(corpus_config)
    engine.ingest()
    server = FinqServer(engine, port=0)
    server.start_background()
    yield f"http://127.0.0.1:{server.port}", engine
    server.shutdown()
    server.server_close()


def test_query_ok_and_empty(service):
    url, _ = service
    r = requests.post(url + "/query", json={"text": "risk"})
    assert r.status_code == 200 and isinstance(r.json()["results"], list) and r.json()["results"]
    r = requests.post(url + "/query", json={"text": ""})
    assert r.status_code == 400
    assert r.json() == {"error": {"stage": "validate", "code": "EmptyQuery", "message": "query text is empty"}}


def test_bad_requests(service):
    url, _ = service
    assert requests.post(url + "/query", data=b"{not json").status_code == 400
    assert requests.post(url + "/query", json=["risk"]).status_code == 400
    r = requests.post(url + "/query", json={"text": "risk", "alpha": 3})
    assert r.status_code == 400 and r.json()["error"]["code"] == "InvalidParameter"
    assert requests.get(url + "/nowhere").status_code == 404


def test_documents_idempotent_with_probe_equality(service):
    url, engine = service
    doc = {"object_id": "push/memo", "title": "Memo", "body": "JPMorgan liquidity memo for the desk"}
    probes = [{"text": t} for t in ("liquidity memo", "jpmorgan", corpus.FILLER_QUERY)]
    assert requests.post(url + "/documents", json=doc).json() == {"status": "New"}
    before = [without_timings(requests.post(url + "/query", json=p).json()) for p in probes]
    assert requests.post(url + "/documents", json=doc).json() == {"status": "Unchanged"}
    after = [without_timings(requests.post(url + "/query", json=p).json()) for p in probes]
    assert before == after
    assert requests.get(url + "/health").json() == {"status": "ok", "indexed_docs": 31, "snapshot_version": 1}
    r = requests.post(url + "/documents", json={"object_id": "push/x", "title": "t", "body": ""})
    assert r.status_code == 400


def test_provider_failure_maps_to_503(service):
    url, engine = service

    class Down(LocalEmbeddingProvider):
        def embed(self, text):
            raise ProviderUnavailable("down")

    engine.retriever.provider = Down()
    r = requests.post(url + "/query", json={"text": "credit risk models today", "mode": "semantic"})
    assert r.status_code == 503 and r.json()["error"]["stage"] == "embed"


def test_cli_and_http_payloads_identical(service, corpus_config, capsys):
    url, _ = service
    for text, mode in [(corpus.FILLER_QUERY, "auto"), ("nvidia", "keyword"), ("bond maturities", "semantic")]:
        http = requests.post(url + "/query", json={"text": text, "mode": mode}).json()
        assert main(["query", text, "--mode", mode, "--format", "json", "--config", str(corpus_config)]) == 0
        cli = json.loads(capsys.readouterr().out)
        assert without_timings(cli) == without_timings(http)


def test_concurrent_queries_during_pushes(service):
    url, _ = service
    errors = []

    def pusher():
        for i in range(15):
            body = {"object_id": f"push/{i}", "title": "t", "body": f"credit memo number {i}"}
            r = requests.post(url + "/documents", json=body)
            if r.status_code != 200:
                errors.append(r.text)

    def querier():
        for _ in range(25):
            r = requests.post(url + "/query", json={"text": "credit memo", "mode": "hybrid"})
            if r.status_code != 200:
                errors.append(r.text)
            health = requests.get(url + "/health").json()
            if not 30 <= health["indexed_docs"] <= 45:
                errors.append(health)

    threads = [threading.Thread(target=pusher)] + [threading.Thread(target=querier) for _ in range(3)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert errors == []
    assert requests.get(url + "/health").json()["indexed_docs"] == 45
