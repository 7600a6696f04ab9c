import json

import httpx
import numpy as np
import pytest

from metastab.judge import (ClientError, HttpCaptioner, HttpDetector, HttpJudge, JudgeConfig, JudgeParseError,
                            MockCaptioner, MockDetector, MockJudge, RateLimiter, detect_objects, judge_run,
                            load_vocabulary, parse_judgement, prompt_template, score_caption, with_retry)


def no_sleep(_):
    pass


def fixture_videos(n=4):
    rng = np.random.default_rng(0)
    return {f"v{i}": rng.random((12, 8, 8, 3)) for i in range(n)}


def scripted_judge(scores):
    """Judge whose score depends on which caption appears in the prompt."""
    def score(prompt):
        for vid, s in scores.items():
            if f"caption for {vid}" in prompt:
                return s
        raise AssertionError("unexpected prompt")
    return MockJudge(score=score)


def captioner_for(videos):
    from metastab.judge import _video_digest
    return MockCaptioner({_video_digest(f): f"A caption for {vid}." for vid, f in videos.items()})


def test_mean_and_hsr_by_hand():
    videos = fixture_videos()
    scores = {"v0": 9, "v1": 7, "v2": 8, "v3": 4}
    report = judge_run(videos, captioner_for(videos), MockDetector([[{"label": "car", "score": 0.9}]]),
                       scripted_judge(scores), sleep=no_sleep)
    assert report.scores == [9, 7, 8, 4]
    assert report.mean_score == 7.0
    assert report.hsr == 0.5
    assert report.failures == []


def test_report_is_byte_identical_across_runs():
    videos = fixture_videos()
    texts = []
    for _ in range(2):
        rep = judge_run(videos, captioner_for(videos), MockDetector([[{"label": "dog"}]]),
                        MockJudge(score=6), sleep=no_sleep)
        texts.append(rep.to_json())
    assert texts[0] == texts[1]
    assert json.loads(texts[0])["mean_score"] == 6.0


def test_prompt_embeds_caption_objects_and_rubric():
    p = prompt_template("  A dog runs. ", ["Dog", "tree", "dog", " "])
    assert "Caption: A dog runs." in p
    assert "Detected objects: dog, tree." in p
    for word in ("accuracy", "relevance", "completeness", "clarity", '"score"'):
        assert word in p
    assert "no_objects" in prompt_template("x", [])


@pytest.mark.parametrize("text,score", [
    ('{"score": 7, "justification": "ok"}', 7),
    ('Sure!\n```json\n{"score": 10, "justification": "great"}\n```', 10),
    ('{"score": 3.0}', 3),
])
def test_parse_judgement_accepts(text, score):
    assert parse_judgement(text)["score"] == score


@pytest.mark.parametrize("text", ['{"score": 11}', '{"score": 7.5}', '{"score": "8"}', "eight", "{}",
                                  '{"score": true}'])
def test_parse_judgement_rejects(text):
    with pytest.raises(JudgeParseError):
        parse_judgement(text)


def test_malformed_reply_gets_one_repair_prompt():
    judge = MockJudge(replies=["I think 8/10", '{"score": 8, "justification": "fixed"}'])
    result, raw = score_caption(judge, "cap", ["car"], sleep=no_sleep)
    assert result["score"] == 8 and len(raw) == 2
    assert judge.prompts[1].startswith("Your previous reply")
    with pytest.raises(JudgeParseError):
        score_caption(MockJudge(replies=["nope", "still nope"]), "cap", [], sleep=no_sleep)


def test_failed_video_is_recorded_not_raised():
    videos = fixture_videos(2)
    judge = MockJudge(replies=['{"score": 9}', "bad", "bad again"])
    rep = judge_run(videos, captioner_for(videos), MockDetector(), judge, sleep=no_sleep)
    assert rep.scores == [9] and rep.failures == ["v1"]
    d = rep.as_dict()
    assert d["n_failed"] == 1 and d["videos"][1]["error"].startswith("JudgeParseError")
    assert d["videos"][0]["no_objects"] is True


def test_detect_objects_stride_threshold_and_dedup():
    seen = []

    def script(i, frame):
        seen.append(i)
        return [{"label": "Car", "score": 0.9}, {"label": "ghost", "score": 0.1}, {"label": "car"}]

    frames = np.zeros((25, 4, 4, 3))
    assert detect_objects(frames, MockDetector(script), stride=10, threshold=0.3) == ["car"]
    assert seen == [0, 1, 2]
    with pytest.raises(ValueError):
        detect_objects(frames, MockDetector(), stride=0)


def test_retry_backoff_and_give_up():
    calls, sleeps = [], []

    def flaky():
        calls.append(1)
        if len(calls) < 3:
            raise OSError("down")
        return "ok"

    assert with_retry(flaky, attempts=3, base_delay=0.5, sleep=sleeps.append) == "ok"
    assert sleeps == [0.5, 1.0]
    with pytest.raises(ClientError, match="3 attempts"):
        with_retry(lambda: 1 / 0, attempts=3, sleep=no_sleep)


def test_rate_limiter_spaces_calls():
    now = [0.0]
    slept = []

    def sleep(d):
        slept.append(d)
        now[0] += d

    lim = RateLimiter(per_second=4.0, clock=lambda: now[0], sleep=sleep)
    for _ in range(3):
        lim.wait()
    assert slept == [0.25, 0.25]


def test_vocabulary_is_packaged():
    vocab = load_vocabulary()
    assert len(vocab) > 20 and vocab == sorted(set(vocab))
    assert "person" in vocab


def test_http_clients_against_mock_transport():
    seen = []

    def handler(request):
        body = json.loads(request.content)
        seen.append((request.url.path, request.headers.get("authorization"), body))
        if request.url.path == "/detect":
            return httpx.Response(200, json={"detections": [{"label": "cat", "score": 0.8}]})
        reply = '{"score": 9, "justification": "j"}' if body.get("response_format") else "A cat."
        return httpx.Response(200, json={"choices": [{"message": {"content": reply}}]})

    t = httpx.MockTransport(handler)
    frames = np.zeros((3, 8, 8, 3))
    cap = HttpCaptioner("http://x", api_key="k", model="m", transport=t, rate=0)
    assert cap.caption(frames) == "A cat."
    det = HttpDetector("http://x", transport=t, rate=0)
    assert det.detect(frames[0], ["cat"]) == [{"label": "cat", "score": 0.8}]
    judge = HttpJudge("http://x", transport=t, rate=0)
    assert parse_judgement(judge.complete("p"))["score"] == 9
    assert seen[0][1] == "Bearer k" and seen[0][2]["temperature"] == 0
    assert len(seen[0][2]["messages"][0]["content"]) == 1 + 3


def test_http_client_requires_endpoint(monkeypatch):
    monkeypatch.delenv("JUDGE_API_BASE", raising=False)
    with pytest.raises(ClientError, match="JUDGE_API_BASE"):
        HttpJudge()


def test_http_errors_are_retried_then_raised():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(503)

    judge = HttpJudge("http://x", transport=httpx.MockTransport(handler), rate=0, attempts=2)
    with pytest.raises(ClientError):
        judge.complete("p")
    assert len(calls) == 2


def test_judge_config_serializes():
    assert JudgeConfig(stride=5).as_dict()["stride"] == 5
