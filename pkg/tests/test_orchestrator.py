import dataclasses
import random

import pytest

from medvqa import cli, knowledge
from medvqa.agents import Confidence
from medvqa.core import ConfigError, QuestionKind, RunConfig
from medvqa.fewshot import CandidateExample
from medvqa.gateway import ScriptRecord, build_backends
from medvqa.orchestrator import (
    StopReason,
    parse_trace,
    run_sample,
    serialize_trace,
    trace_to_json,
)

from conftest import expected_iterations, loop_records, make_config, make_sample, script_backends


def run_case_study(paths):
    config = RunConfig.from_toml(paths["config"])
    sample = cli.load_sample_file(paths["sample"])
    backends = build_backends(config)
    graph = knowledge.load_kg(config.kg_path)
    return run_sample(sample, config, backends, graph=graph)


class Recorder:
    """Wraps a backend, keeping (role, prompt_text) for every call."""

    def __init__(self, inner, role, sink):
        self.inner = inner
        self.role = role
        self.sink = sink

    @property
    def model_id(self):
        return self.inner.model_id

    def complete(self, request):
        return self.complete_with_meta(request)[0]

    def complete_with_meta(self, request):
        self.sink.append((self.role, request.prompt_text()))
        return self.inner.complete_with_meta(request)


class TestCaseStudyRun:
    def test_full_trace(self, case_study_paths):
        trace = run_case_study(case_study_paths)
        assert not trace.failed
        assert trace.initial_reasoned.normalized == "Yes"
        assert trace.initial_confidence.score == 1
        record = trace.iterations[0]
        assert len(record.sub_qas) == 3
        assert [qa.level.name for qa in record.sub_qas] == [
            "GENERAL_OBSERVATION", "ANATOMICAL_ANALYSIS", "DETAILED_FINDING",
        ]
        assert "Lung disease Localizes in: cavity, chest, diaphragm, mediastinum" \
            in record.rag_context
        assert record.reasoned.normalized == "No"
        assert record.confidence.score == 4
        assert trace.stop_reason is StopReason.CONFIDENCE_MET
        assert len(trace.iterations) == 1
        assert trace.final_answer == "No, the midline of the mediastinum has not shifted."

    def test_history_monotonic_and_complete(self, case_study_paths):
        config = RunConfig.from_toml(case_study_paths["config"])
        sample = cli.load_sample_file(case_study_paths["sample"])
        backends = build_backends(config)
        calls = []
        wrapped = dataclasses.replace(
            backends,
            **{role: Recorder(getattr(backends, role), role, calls)
               for role in ("perceiver", "reasoner", "evaluator", "explorer", "retriever")},
        )
        graph = knowledge.load_kg(config.kg_path)
        trace = run_sample(sample, config, wrapped, graph=graph)
        assert not trace.failed
        final_eval_prompt = [p for role, p in calls if role == "evaluator"][-1]
        history_block = final_eval_prompt.split("History:\n", 1)[1]
        expected_headers = [
            "[Perceiver | iter 0 | caption]",
            "[Perceiver | iter 0 | initial_answer]",
            "[Reasoner | iter 0 | answer]",
            "[Evaluator | iter 0 | confidence]",
            "[Explorer | iter 1 | sub_qa]",
            "[Explorer | iter 1 | sub_qa]",
            "[Explorer | iter 1 | sub_qa]",
            "[Retriever | iter 1 | rag_context]",
            "[Reasoner | iter 1 | answer]",
        ]
        position = 0
        for header in expected_headers:
            found = history_block.find(header, position)
            assert found != -1, f"missing or out of order: {header}"
            position = found + len(header)
        for header in set(expected_headers):
            assert history_block.count(header) == expected_headers.count(header)

    def test_trace_round_trip_and_determinism(self, case_study_paths):
        first = run_case_study(case_study_paths)
        second = run_case_study(case_study_paths)
        assert trace_to_json(first) == trace_to_json(second)
        assert parse_trace(serialize_trace(first)) == first


class TestLoopControl:
    def _run(self, scores, threshold=3, max_iterations=3, fixed_iterations=-1, kind=None):
        records = loop_records(scores, threshold, max_iterations, fixed_iterations)
        backends = script_backends(records)
        config = make_config(
            max_iterations=max_iterations,
            confidence_threshold=threshold,
            fixed_iterations=fixed_iterations,
        )
        sample = make_sample(kind=kind or QuestionKind.CLOSED)
        trace = run_sample(sample, config, backends)
        assert not trace.failed, trace.error
        leftover = sum(s.remaining() for s in backends.scripts.values())
        assert leftover == 0, f"{leftover} unused scripted records"
        return trace

    def test_immediate_stop_on_high_confidence(self):
        trace = self._run([5])
        assert len(trace.iterations) == 0
        assert trace.stop_reason is StopReason.CONFIDENCE_MET

    def test_exhaustion_adopts_final_iteration_answer(self):
        trace = self._run([1, 1, 1, 1])
        assert len(trace.iterations) == 3
        assert trace.stop_reason is StopReason.MAX_ITERATIONS
        assert trace.final_answer == "No (pass 3)"

    def test_threshold_met_mid_loop(self):
        trace = self._run([1, 2, 4, 5])
        assert len(trace.iterations) == 2
        assert trace.stop_reason is StopReason.CONFIDENCE_MET

    def test_score_equal_to_threshold_stops(self):
        trace = self._run([3])
        assert len(trace.iterations) == 0
        assert trace.stop_reason is StopReason.CONFIDENCE_MET

    def test_random_sequences_match_min_rule(self):
        rng = random.Random(1234)
        for _ in range(150):
            max_iterations = rng.randint(1, 4)
            threshold = rng.randint(1, 5)
            scores = [rng.randint(1, 5) for _ in range(max_iterations + 1)]
            trace = self._run(scores, threshold, max_iterations)
            assert len(trace.iterations) == expected_iterations(scores, threshold, max_iterations)

    def test_fixed_iterations_ignores_evaluator(self):
        trace = self._run([1, 1, 1, 1], fixed_iterations=3)
        assert len(trace.iterations) == 3
        assert trace.initial_confidence is None
        assert all(rec.confidence is None for rec in trace.iterations)
        assert trace.stop_reason is StopReason.MAX_ITERATIONS

    def test_fixed_zero_iterations(self):
        trace = self._run([5], fixed_iterations=0)
        assert len(trace.iterations) == 0
        assert trace.stop_reason is StopReason.MAX_ITERATIONS


class TestDegradedIterations:
    def test_empty_decomposition_still_reasons(self):
        records = [
            ScriptRecord("perceiver", "caption."),
            ScriptRecord("perceiver", "initial."),
            ScriptRecord("reasoner", "Analysis: a.\n\nAnswer: No"),
            ScriptRecord("evaluator", "Score: 1\nExplanation: weak"),
            ScriptRecord("explorer", "I refuse to decompose."),
            ScriptRecord("reasoner", "Analysis: b.\n\nAnswer: No again"),
            ScriptRecord("evaluator", "Score: 5\nExplanation: fine"),
        ]
        trace = run_sample(make_sample(), make_config(), script_backends(records))
        assert not trace.failed
        record = trace.iterations[0]
        assert record.sub_qas == ()
        assert record.reasoned.answer == "No again"
        assert trace.stop_reason is StopReason.CONFIDENCE_MET

    def test_reason_format_error_retains_previous_answer(self):
        records = [
            ScriptRecord("perceiver", "caption."),
            ScriptRecord("perceiver", "initial."),
            ScriptRecord("reasoner", "Analysis: a.\n\nAnswer: No"),
            ScriptRecord("evaluator", "Score: 1\nExplanation: weak"),
            ScriptRecord("explorer", "Sub-question 1: Q?"),
            ScriptRecord("perceiver", "A."),
            ScriptRecord("reasoner", "garbled output with no verdict"),
            # forced score 1 -> loop continues without consuming an evaluator record
            ScriptRecord("explorer", "Sub-question 1: Q again?"),
            ScriptRecord("perceiver", "A2."),
            ScriptRecord("reasoner", "Analysis: c.\n\nAnswer: Yes"),
            ScriptRecord("evaluator", "Score: 4\nExplanation: better"),
        ]
        trace = run_sample(make_sample(), make_config(max_iterations=2),
                           script_backends(records))
        assert not trace.failed
        first, second = trace.iterations
        assert first.reasoned.answer == "No"  # retained from the pre-loop pass
        assert first.confidence == Confidence(1, "reasoner format error; previous answer retained")
        assert second.reasoned.answer == "Yes"
        assert trace.final_answer == "Yes"

    def test_reason_format_error_on_initial_pass_uses_perceiver_answer(self):
        records = [
            ScriptRecord("perceiver", "caption."),
            ScriptRecord("perceiver", "Yes, clearly abnormal."),
            ScriptRecord("reasoner", "no verdict"),
            ScriptRecord("explorer", "Sub-question 1: Q?"),
            ScriptRecord("perceiver", "A."),
            ScriptRecord("reasoner", "Analysis: b.\n\nAnswer: No"),
            ScriptRecord("evaluator", "Score: 5\nExplanation: ok"),
        ]
        trace = run_sample(make_sample(), make_config(max_iterations=1),
                           script_backends(records))
        assert not trace.failed
        assert trace.initial_reasoned.answer == "Yes, clearly abnormal."
        assert trace.initial_reasoned.normalized == "Yes"
        assert trace.initial_confidence.score == 1
        assert trace.final_answer == "No"

    def test_evaluator_format_error_treated_as_score_one(self):
        records = [
            ScriptRecord("perceiver", "caption."),
            ScriptRecord("perceiver", "initial."),
            ScriptRecord("reasoner", "Analysis: a.\n\nAnswer: No"),
            ScriptRecord("evaluator", "I will not grade this."),
            ScriptRecord("explorer", "Sub-question 1: Q?"),
            ScriptRecord("perceiver", "A."),
            ScriptRecord("reasoner", "Analysis: b.\n\nAnswer: No"),
            ScriptRecord("evaluator", "Score: 5\nExplanation: ok"),
        ]
        trace = run_sample(make_sample(), make_config(), script_backends(records))
        assert not trace.failed
        assert trace.initial_confidence == Confidence(1, "unparseable evaluator response")
        assert len(trace.iterations) == 1


class TestFailureHandling:
    def test_script_exhaustion_marks_trace_failed(self):
        records = [
            ScriptRecord("perceiver", "caption."),
            ScriptRecord("perceiver", "initial."),
        ]
        trace = run_sample(make_sample(), make_config(), script_backends(records))
        assert trace.failed
        assert "exhausted" in trace.error
        assert trace.caption == "caption."
        assert trace.stop_reason is None

    def test_failed_trace_serializes(self):
        records = [ScriptRecord("perceiver", "caption.")]
        trace = run_sample(make_sample(), make_config(), script_backends(records))
        assert trace.failed
        doc = serialize_trace(trace)
        assert doc["failed"] is True and doc["error"]
        assert parse_trace(doc) == trace

    def test_history_overflow_is_explicit_error(self):
        records = loop_records([5], threshold=3, max_iterations=3)
        trace = run_sample(make_sample(), make_config(max_history_chars=10),
                           script_backends(records))
        assert trace.failed
        assert "history exceeds" in trace.error or "history" in trace.error


class TestCallLog:
    def test_roles_logged_in_order(self):
        records = loop_records([5], threshold=3, max_iterations=3)
        trace = run_sample(make_sample(), make_config(), script_backends(records))
        assert [role for role, _ in trace.backend_call_log] == \
            ["perceiver", "perceiver", "reasoner", "evaluator"]
        assert all(hit is False for _, hit in trace.backend_call_log)


class TestFewShotIntegration:
    def _pool(self):
        def candidate(i, text_emb):
            return CandidateExample(
                id=f"p{i}", caption=f"pool caption {i}", question=f"pool question {i}?",
                answer=f"pool answer {i}", text_embedding=text_emb, image_embedding=(1.0, 0.0),
            )

        return [candidate(1, (1.0, 0.0)), candidate(2, (0.0, 1.0))]

    def test_selected_examples_enter_reasoner_and_evaluator_prompts(self):
        records = loop_records([5], threshold=3, max_iterations=3)
        table = {"Is the lung normal?": [1.0, 0.0], "images/s1.png": [1.0, 0.0]}
        backends = script_backends(records, embed_table=table)
        calls = []
        wrapped = dataclasses.replace(
            backends,
            reasoner=Recorder(backends.reasoner, "reasoner", calls),
            evaluator=Recorder(backends.evaluator, "evaluator", calls),
        )
        trace = run_sample(make_sample(), make_config(k_shot=1), wrapped, pool=self._pool())
        assert not trace.failed, trace.error

        reasoner_prompt = next(p for role, p in calls if role == "reasoner")
        assert "Some similar examples with their answers for reference:" in reasoner_prompt
        assert "Example 1:\nImage description: pool caption 1" in reasoner_prompt
        assert "pool caption 2" not in reasoner_prompt  # k=1 picks the closer candidate

        evaluator_prompt = next(p for role, p in calls if role == "evaluator")
        assert "Some similar examples with their answers for reference:" in evaluator_prompt

        roles = [role for role, _ in trace.backend_call_log]
        assert roles.count("text_embedder") == 1
        assert roles.count("image_embedder") == 1

    def test_k_shot_without_pool_is_config_error(self):
        records = loop_records([5], threshold=3, max_iterations=3)
        backends = script_backends(records)
        with pytest.raises(ConfigError, match="pool"):
            run_sample(make_sample(), make_config(k_shot=2), backends, pool=None)
