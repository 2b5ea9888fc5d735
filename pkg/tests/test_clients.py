import base64
import json

import httpx
import numpy as np
import pytest

from viscotbench.clients import (
    ExactMatchJudge,
    HttpGrounderClient,
    HttpModelClient,
    MockGrounder,
    MockJudge,
    ModelRequest,
    RemoteLlmJudge,
    ScriptedMockModel,
    decode_image_b64,
    encode_image_b64,
    judge_answer,
    normalize_answer,
    parse_bbox_text,
    propose_regions,
    query_model,
)
from viscotbench.errors import EndpointError, JudgeError, TransportError
from viscotbench.imagecore import BBox, make_rng, quantize


@pytest.fixture
def img():
    return make_rng(1).random((10, 12, 3))


def _mock_client(cls, handler, **kwargs):
    return cls(
        "http://mock/api", transport=httpx.MockTransport(handler), sleep=lambda s: None, **kwargs
    )


class TestImageCodec:
    def test_roundtrip_is_quantization(self, img):
        decoded = decode_image_b64(encode_image_b64(img))
        np.testing.assert_array_equal(decoded, quantize(img))

    def test_payload_is_valid_png(self, img):
        raw = base64.b64decode(encode_image_b64(img))
        assert raw[:8] == b"\x89PNG\r\n\x1a\n"


class TestModelRequest:
    def test_needs_an_image(self):
        with pytest.raises(ValueError):
            ModelRequest("q", (), "direct_answer")

    def test_bbox_mode_single_image(self, img):
        with pytest.raises(ValueError):
            ModelRequest("q", (img, img), "predict_bbox")

    def test_unknown_mode(self, img):
        with pytest.raises(ValueError):
            ModelRequest("q", (img,), "explain")


class TestParseBboxText:
    def test_normalized_coordinates_scale_by_dims(self):
        # 100x200 image: height 100, width 200
        box = parse_bbox_text("[0.1, 0.2, 0.5, 0.6]", width=200, height=100)
        assert box == BBox(20.0, 20.0, 100.0, 60.0)

    def test_pixel_coordinates_pass_through(self):
        box = parse_bbox_text("the region is [10, 20, 50, 60].", width=100, height=100)
        assert box == BBox(10.0, 20.0, 50.0, 60.0)

    def test_no_bbox_is_a_miss(self):
        assert parse_bbox_text("cannot locate it", 10, 10) is None

    def test_inverted_is_a_miss(self):
        assert parse_bbox_text("[5, 5, 1, 9]", 10, 10) is None


class TestHttpModelClient:
    def test_simple_wire_format(self, img):
        seen = {}

        def handler(request: httpx.Request) -> httpx.Response:
            seen.update(json.loads(request.content))
            return httpx.Response(200, json={"text": "answer: cat"})

        client = _mock_client(HttpModelClient, handler)
        resp = query_model(client, ModelRequest("what animal?", (img,), "direct_answer"))
        assert resp.text == "answer: cat"
        assert seen["question"] == "what animal?"
        assert seen["mode"] == "direct_answer"
        decoded = decode_image_b64(seen["images"][0])
        np.testing.assert_array_equal(decoded, quantize(img))

    def test_bbox_mode_parses_response(self, img):
        def handler(request):
            return httpx.Response(200, json={"text": "[0.5, 0.5, 1.0, 1.0]"})

        client = _mock_client(HttpModelClient, handler)
        resp = client.query(ModelRequest("where?", (img,), "predict_bbox"))
        h, w = img.shape[:2]
        assert resp.parsed_bbox == BBox(0.5 * w, 0.5 * h, 1.0 * w, 1.0 * h)

    def test_unparseable_bbox_not_fatal(self, img):
        def handler(request):
            return httpx.Response(200, json={"text": "no idea"})

        client = _mock_client(HttpModelClient, handler)
        resp = client.query(ModelRequest("where?", (img,), "predict_bbox"))
        assert resp.parsed_bbox is None

    def test_three_attempts_then_transport_error(self, img):
        calls = []

        def handler(request):
            calls.append(1)
            raise httpx.ConnectError("down")

        client = _mock_client(HttpModelClient, handler)
        with pytest.raises(TransportError):
            client.query(ModelRequest("q", (img,), "direct_answer"))
        assert len(calls) == 3

    def test_recovers_after_transient_failure(self, img):
        calls = []

        def handler(request):
            calls.append(1)
            if len(calls) < 3:
                raise httpx.ReadTimeout("slow")
            return httpx.Response(200, json={"text": "ok"})

        client = _mock_client(HttpModelClient, handler)
        assert client.query(ModelRequest("q", (img,), "direct_answer")).text == "ok"

    def test_http_error_no_retry(self, img):
        calls = []

        def handler(request):
            calls.append(1)
            return httpx.Response(503, json={"detail": "overloaded"})

        client = _mock_client(HttpModelClient, handler)
        with pytest.raises(EndpointError):
            client.query(ModelRequest("q", (img,), "direct_answer"))
        assert len(calls) == 1

    def test_chat_wire_format(self, img):
        seen = {}

        def handler(request):
            seen.update(json.loads(request.content))
            return httpx.Response(
                200, json={"choices": [{"message": {"content": "a bird"}}]}
            )

        client = _mock_client(HttpModelClient, handler, wire="chat")
        resp = client.query(ModelRequest("what?", (img, img), "direct_answer"))
        assert resp.text == "a bird"
        content = seen["messages"][0]["content"]
        assert content[0] == {"type": "text", "text": "what?"}
        assert content[1]["image_url"]["url"].startswith("data:image/png;base64,")
        assert len(content) == 3


class TestJudges:
    def test_exact_match_normalization(self):
        judge = ExactMatchJudge()
        assert judge_answer(judge, "Paris.", "paris", "capital?")
        assert not judge_answer(judge, "dog", "cat", "animal?")
        assert judge_answer(judge, "  The CAT!  ", "the cat", "animal?")

    def test_normalize_answer(self):
        assert normalize_answer(" Hello,  World!! ") == "hello world"

    def test_remote_judge_yes(self):
        def handler(request):
            body = json.loads(request.content)
            assert "Candidate answer: lion" in body["messages"][0]["content"]
            return httpx.Response(200, json={"choices": [{"message": {"content": "YES"}}]})

        judge = _mock_client(RemoteLlmJudge, handler)
        assert judge.judge("lion", "a lion", "what animal?") is True
        assert judge.version.startswith("llm/")

    def test_remote_judge_no(self):
        def handler(request):
            return httpx.Response(200, json={"choices": [{"message": {"content": "no."}}]})

        judge = _mock_client(RemoteLlmJudge, handler)
        assert judge.judge("lion", "tiger", "what animal?") is False

    def test_remote_judge_unparseable(self):
        def handler(request):
            return httpx.Response(200, json={"choices": [{"message": {"content": "maybe?"}}]})

        judge = _mock_client(RemoteLlmJudge, handler)
        with pytest.raises(JudgeError):
            judge.judge("a", "b", "q")

    def test_mock_judge_overrides(self):
        judge = MockJudge({"verdicts": {"close enough||exact": True}})
        assert judge.judge("close enough", "exact", "q") is True
        assert judge.judge("exact", "exact", "q") is True
        assert judge.judge("wrong", "exact", "q") is False


class TestGrounder:
    def test_wire_format_and_parsing(self, img):
        seen = {}

        def handler(request):
            seen.update(json.loads(request.content))
            return httpx.Response(
                200,
                json={
                    "boxes": [[1, 2, 5, 6], [0, 0, 3, 3]],
                    "scores": [0.8, 0.6],
                    "phrases": ["a", "b"],
                },
            )

        client = _mock_client(HttpGrounderClient, handler)
        props = client.propose(img, "find the thing")
        assert seen["caption"] == "find the thing"
        assert "image" in seen
        assert [p.score for p in props] == [0.8, 0.6]
        assert props[0].box == BBox(1, 2, 5, 6)

    def test_threshold_filter_and_sort(self, img):
        grounder = MockGrounder(
            {
                "proposals": [
                    {"box": [1, 1, 4, 4], "score": 0.5, "phrase": "mid"},
                    {"box": [0, 0, 2, 2], "score": 0.9, "phrase": "high"},
                    {"box": [3, 3, 6, 6], "score": 0.3, "phrase": "low"},
                ]
            }
        )
        props = propose_regions(grounder, img, "q", threshold=0.4)
        assert [p.phrase for p in props] == ["high", "mid"]

    def test_threshold_one_empty(self, img):
        grounder = MockGrounder({"proposals": [{"box": [0, 0, 1, 1], "score": 0.95}]})
        assert propose_regions(grounder, img, "q", threshold=1.0) == []

    def test_mock_deterministic(self, img):
        grounder = MockGrounder(
            {"normalized": True, "proposals": [{"box": [0.1, 0.1, 0.6, 0.6], "score": 0.7}]}
        )
        a = propose_regions(grounder, img, "q")
        b = propose_regions(grounder, img, "q")
        assert a == b
        h, w = img.shape[:2]
        assert a[0].box == BBox(0.1 * w, 0.1 * h, 0.6 * w, 0.6 * h)

    def test_bad_threshold(self, img):
        with pytest.raises(ValueError):
            propose_regions(MockGrounder(), img, "q", threshold=1.5)


class TestScriptedMockModel:
    def test_echo_ground_truth(self, img):
        model = ScriptedMockModel({"echo_ground_truth": True})
        resp = model.query(
            ModelRequest("q", (img,), "direct_answer"),
            context={"sample_id": "s1", "ground_truth": "blue", "severity": 0},
        )
        assert resp.text == "blue"

    def test_scripted_answer_wins(self, img):
        model = ScriptedMockModel({"answers": {"s1": "scripted"}, "echo_ground_truth": True})
        resp = model.query(
            ModelRequest("q", (img,), "direct_answer"),
            context={"sample_id": "s1", "ground_truth": "blue"},
        )
        assert resp.text == "scripted"

    def test_bbox_mode(self, img):
        model = ScriptedMockModel({"bbox_by_sample": {"s1": "[1, 2, 5, 6]"}})
        resp = model.query(
            ModelRequest("q", (img,), "predict_bbox"), context={"sample_id": "s1"}
        )
        assert resp.parsed_bbox == BBox(1, 2, 5, 6)

    def test_severity_failures_are_nested(self, img):
        model = ScriptedMockModel({"echo_ground_truth": True, "severity_fail_rate": 0.15})
        req = ModelRequest("q", (img,), "direct_answer")
        for sample in [f"s{i}" for i in range(40)]:
            failed_before = False
            for severity in range(1, 6):
                ctx = {
                    "sample_id": sample,
                    "ground_truth": "gt",
                    "severity": severity,
                    "perturbation": "gaussian_noise",
                }
                failed = model.query(req, context=ctx).text != "gt"
                assert not (failed_before and not failed)
                failed_before = failed

    def test_deterministic(self, img):
        model = ScriptedMockModel({"default_answer": "x"})
        req = ModelRequest("q", (img,), "direct_answer")
        assert model.query(req).text == model.query(req).text
