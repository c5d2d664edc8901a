"""End-to-end server tests over real TCP with the built-in stub worker."""

import dataclasses
import time

import numpy as np
import pytest

from inlinecmr import wire
from inlinecmr.server import InlineServer
from inlinecmr.sim import phantom, session
from inlinecmr.sim.client import run_client
from inlinecmr.sim.verify import report_documents, verify_run


@pytest.fixture
def server():
    with InlineServer(port=0) as srv:
        yield srv


def endpoint(server):
    return f"127.0.0.1:{server.port}"


def wait_for_summary(server, n=1, timeout=30):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if len(server.summaries) >= n:
            return server.summaries
        time.sleep(0.02)
    raise AssertionError("server never recorded the connection summary")


class TestLifecycle:
    def test_empty_session_clean_close(self, server, small_params):
        messages = [
            wire.ConfigInline(session.default_chain_text("sax")),
            wire.SessionHeader(session.session_header_fields(
                small_params, "sax", "p1")),
            wire.Close(),
        ]
        result = run_client(endpoint(server), messages)
        assert result.summary.terminated
        texts = [m.text for m in result.received if isinstance(m, wire.Text)]
        assert texts == ["chain ready"]   # readiness note, no errors
        summary = wait_for_summary(server)[0]
        assert summary.error is None
        assert all(s.in_count == 0 for s in summary.stages)

    def test_close_before_config(self, server):
        result = run_client(endpoint(server), [wire.Close()])
        assert result.summary.terminated

    def test_sequential_connections_isolated(self, server, small_params):
        # identical sessions must yield byte-identical reports: the second
        # connection sees no residue of the first
        reports = []
        for _ in range(2):
            messages, _ = session.generate_session("sax", small_params)
            result = run_client(endpoint(server), messages)
            texts = [m.text for m in result.received
                     if isinstance(m, wire.Report)]
            assert len(texts) == 1
            reports.append(texts[0])
        assert reports[0] == reports[1]
        summaries = wait_for_summary(server, n=2)
        assert all(s.error is None for s in summaries[-2:])


class TestConfigByName:
    def test_named_chain_loaded_from_directory(self, tmp_path, small_params):
        chain_path = tmp_path / "sim_lax.chain"
        chain_path.write_text(session.default_chain_text("lax"),
                              encoding="utf-8")
        with InlineServer(port=0, chains_dir=str(tmp_path)) as srv:
            messages, _ = session.generate_session("lax", small_params)
            messages[0] = wire.ConfigName("sim_lax")
            result = run_client(endpoint(srv), messages)
            assert any(isinstance(m, wire.Report) for m in result.received)
        summary = srv.summaries[-1]
        assert summary.chain_name == "sim_lax"
        assert summary.error is None

    def test_unknown_chain_name_rejected(self, server):
        result = run_client(endpoint(server), [
            wire.ConfigName("missing_chain"), wire.Close()])
        texts = [m.text for m in result.received if isinstance(m, wire.Text)]
        assert any("bad chain config" in t for t in texts)


class TestErrors:
    def test_bad_config_rejected_as_text_then_close(self, server):
        result = run_client(endpoint(server), [
            wire.ConfigInline("not a config"), wire.Close()])
        texts = [m for m in result.received if isinstance(m, wire.Text)]
        assert texts and "bad chain config" in texts[0].text
        assert result.summary.terminated

    def test_unknown_gadget_is_assembly_error(self, server, small_params):
        chain = ("[chain]\nreader=icsp\nwriter=icsp\ngadgets = mystery\n")
        result = run_client(endpoint(server), [
            wire.ConfigInline(chain),
            wire.SessionHeader(session.session_header_fields(
                small_params, "sax", "p")),
            wire.Close()])
        texts = [m.text for m in result.received if isinstance(m, wire.Text)]
        assert any("mystery" in t for t in texts)

    def test_data_before_config_rejected(self, server):
        header = wire.ReadoutHeader(num_samples=4, num_coils=1)
        readout = wire.KSpaceReadout(
            header, np.zeros((1, 4), dtype=np.complex64))
        result = run_client(endpoint(server), [readout, wire.Close()])
        texts = [m.text for m in result.received if isinstance(m, wire.Text)]
        assert any("before chain configuration" in t for t in texts)

    def test_stage_failure_notifies_client_and_releases_worker(
            self, server, small_params):
        from inlinecmr import bridge

        messages, _ = session.generate_session("sax", small_params)
        acq = [m for m in messages if isinstance(m, wire.KSpaceReadout)]
        # a decreasing slice index violates the trigger's ordering contract
        out_of_order = [messages[0], messages[1],
                        acq[-1], acq[0], wire.Close()]
        result = run_client(endpoint(server), out_of_order)
        texts = [m.text for m in result.received if isinstance(m, wire.Text)]
        assert any("decreased" in t for t in texts)
        assert result.summary.terminated
        deadline = time.monotonic() + 10
        while bridge.live_worker_count() and time.monotonic() < deadline:
            time.sleep(0.05)
        assert bridge.live_worker_count() == 0

    def test_unknown_model_fails_assembly(self, server, small_params):
        chain_text = session.default_chain_text("sax").replace(
            "level_segmenter", "bogus_model")
        messages, _ = session.generate_session("sax", small_params)
        messages[0] = wire.ConfigInline(chain_text)
        result = run_client(endpoint(server), messages[:3] + [wire.Close()])
        texts = [m.text for m in result.received if isinstance(m, wire.Text)]
        assert any("bogus_model" in t for t in texts)


class TestSessionLinkage:
    def test_lax_then_sax_applies_valve_plane(self, server, small_params):
        """A LAX scan stores its landmark geometry; the following SAX scan
        of the same patient reports a corrected extent."""
        params = dataclasses.replace(small_params, n_slices=6)
        lax_msgs, _ = session.generate_session("lax", params,
                                               patient_key="link-me")
        run_client(endpoint(server), lax_msgs)

        sax_msgs, _ = session.generate_session("sax", params,
                                               patient_key="link-me")
        result = run_client(endpoint(server), sax_msgs)
        doc = report_documents(result.received)[-1]
        assert "uncorrected extent" not in doc.flags

        solo_msgs, _ = session.generate_session("sax", params,
                                                patient_key="nobody")
        solo = run_client(endpoint(server), solo_msgs)
        solo_doc = report_documents(solo.received)[-1]
        assert "uncorrected extent" in solo_doc.flags

    def test_rest_then_stress_reports_mpr(self, server, small_params):
        rest, _ = session.generate_session("perf_rest", small_params,
                                           patient_key="mpr-pt")
        run_client(endpoint(server), rest)
        stress, truth = session.generate_session("perf_stress", small_params,
                                                 patient_key="mpr-pt")
        result = run_client(endpoint(server), stress)
        verdict = verify_run(result.received, truth, "perf_stress")
        assert verdict.passed, verdict.summary_text()

    def test_negative_flow_in_myocardium_rejected(self, server, small_params):
        messages, _ = session.generate_session("perf_rest", small_params)
        for m in messages:
            if (isinstance(m, wire.ImageFrame)
                    and m.meta_value("perf_role") == "flow"):
                m.pixels = m.pixels - 10.0   # drives myocardial flow negative
        result = run_client(endpoint(server), messages)
        texts = [m.text for m in result.received if isinstance(m, wire.Text)]
        assert any("negative flow" in t for t in texts)

    def test_stress_without_rest_flags_missing(self, server, small_params):
        stress, _ = session.generate_session("perf_stress", small_params,
                                             patient_key="lonely")
        result = run_client(endpoint(server), stress)
        doc = report_documents(result.received)[-1]
        assert any("no rest scan" in f for f in doc.flags)
        assert "perf_mpr" not in doc.tables


class TestPassthrough:
    def test_waveform_returns_to_client(self, server, small_params):
        messages, _ = session.generate_session("lax", small_params)
        wf = wire.Waveform(wire.WF_ECG, 2.0,
                           np.arange(8, dtype=np.float32))
        messages.insert(2, wf)
        result = run_client(endpoint(server), messages)
        echoed = [m for m in result.received if isinstance(m, wire.Waveform)]
        assert len(echoed) == 1
        assert echoed[0] == wf


class TestEnvPort:
    def test_icsp_port_env_used_when_unspecified(self, monkeypatch):
        monkeypatch.setenv("ICSP_PORT", "0")
        with InlineServer() as srv:   # port=None -> env (0 = ephemeral bind)
            assert srv.port > 0


class TestConcurrentConnections:
    def test_two_clients_in_parallel(self, server, small_params):
        import threading

        results = {}

        def run(tag, kind):
            messages, truth = session.generate_session(
                kind, small_params, patient_key=f"par-{tag}")
            results[tag] = (run_client(endpoint(server), messages), truth)

        threads = [threading.Thread(target=run, args=("a", "lax")),
                   threading.Thread(target=run, args=("b", "perf_rest"))]
        for t in threads:
            t.start()
        for t in threads:
            t.join(timeout=60)
        lax_result, lax_truth = results["a"]
        perf_result, perf_truth = results["b"]
        assert verify_run(lax_result.received, lax_truth, "lax").passed
        assert verify_run(perf_result.received, perf_truth,
                          "perf_rest").passed


class TestNormalRanges:
    def test_ranges_echoed_into_report(self, server, small_params, tmp_path):
        ranges = tmp_path / "ranges.txt"
        ranges.write_text(
            "[default]\nEF = 50-75\n\n[female]\nEF = 58.1-78.7\n"
            "EDV = 65.6-138.6\n", encoding="utf-8")
        chain_text = session.default_chain_text("sax")
        chain_text += (f"\n[gadget.sax_analysis]\n"
                       f"normal_ranges_file = {ranges}\n")
        messages, _ = session.generate_session("sax", small_params)
        messages[0] = wire.ConfigInline(chain_text)
        result = run_client(endpoint(server), messages)
        doc = report_documents(result.received)[-1]
        table = doc.tables["sax_function"]
        assert table.lookup("biomarker", "EF (%)", "normal_range") == "58.1-78.7"
        assert table.lookup("biomarker", "EDV (ml)",
                            "normal_range") == "65.6-138.6"
        assert table.lookup("biomarker", "SV (ml)", "normal_range") == "-"


class TestOverlapTimestamps:
    def test_recon_first_emit_precedes_last_acquisition(self, server,
                                                        small_params):
        messages, _ = session.generate_session("sax", small_params)
        run_client(endpoint(server), messages, pacing=True,
                   slice_ms=250.0, gap_ms=100.0)
        summary = wait_for_summary(server)[-1]
        recon = summary.stage("fft_recon")
        assert recon.first_emit_ts is not None
        assert recon.first_emit_ts < summary.last_acquisition_ts

    def test_stage_counts_reconcile(self, server, small_params):
        messages, _ = session.generate_session("sax", small_params)
        result = run_client(endpoint(server), messages)
        summary = wait_for_summary(server)[-1]
        p = small_params
        n_readouts = p.n_slices * p.n_phases * p.matrix
        assert summary.stage("kspace_buffer").in_count == n_readouts
        assert summary.stage("trigger").out_count == p.n_slices
        assert summary.stage("fft_recon").out_count == p.n_slices * p.n_phases
        assert summary.stage("inference").out_count == p.n_slices
        # end-to-end conservation: every reconstructed frame reached the client
        recon_frames = [m for m in result.received
                        if isinstance(m, wire.ImageFrame)
                        and m.meta_value("role") == "recon"]
        assert len(recon_frames) == p.n_slices * p.n_phases
