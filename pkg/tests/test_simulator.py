import csv
import shutil
from dataclasses import replace

import numpy as np
import pytest

import enduro.interactions as ia
from enduro.interactions import ATTACK, DEFEND, InteractionContext, ProbabilityModel
from enduro.simulator import (POLICIES, CompetitorTrace, RaceLog, ScenarioError, compare, load_scenario,
                              make_synthetic_field, read_competitors, resolve_interaction, run_race,
                              soc_reconstruction_error, write_competitors)

SCENARIO_FILES = ("race_log.csv", "laps.csv", "positions.csv", "summary.json")


def edited_copy(src_dir, tmp_path, name, edit):
    """Copy a bundled scenario (with its CSVs) and rewrite its TOML text."""
    for f in src_dir.iterdir():
        if f.suffix == ".csv":
            shutil.copy(f, tmp_path / f.name)
    dst = tmp_path / f"{name}.toml"
    dst.write_text(edit((src_dir / f"{name}.toml").read_text()))
    return dst


class TestScenario:
    def test_zandvoort_like_field(self, scenario_dir):
        sc = load_scenario(scenario_dir / "zandvoort-like.toml")
        assert sc.n_ms == 9
        assert len(sc.competitors) == 31
        assert sc.shares.sum() == pytest.approx(1.0)

    def test_bundled_scenarios(self, synthetic20, toy_scenario, toy):
        assert len(synthetic20.competitors) == 8
        assert synthetic20.config.t_race == 2380.0
        assert np.array_equal(toy_scenario.maps.base.pieces, toy.base.pieces)

    def test_without_competitors(self, scenario_dir, tmp_path):
        path = edited_copy(scenario_dir, tmp_path, "synthetic20",
                           lambda t: t.replace('file = "synthetic20_competitors.csv"', ""))
        assert load_scenario(path).competitors == []

    def test_shares_must_sum_to_one(self, scenario_dir, tmp_path):
        path = edited_copy(scenario_dir, tmp_path, "synthetic20", lambda t: t.replace("0.12, 0.10", "0.22, 0.10", 1))
        with pytest.raises(ScenarioError, match="ms_shares"):
            load_scenario(path)

    def test_missing_field_is_named(self, scenario_dir, tmp_path):
        path = edited_copy(scenario_dir, tmp_path, "synthetic20", lambda t: t.replace("t_race = 2380.0", ""))
        with pytest.raises(ScenarioError, match="t_race"):
            load_scenario(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ScenarioError, match="not found"):
            load_scenario(tmp_path / "nope.toml")

    def test_digest_tracks_inputs(self, scenario_dir, tmp_path, synthetic20):
        path = edited_copy(scenario_dir, tmp_path, "synthetic20", lambda t: t)
        assert load_scenario(path).digest == synthetic20.digest
        path.write_text(path.read_text().replace("t_rl = 0.3", "t_rl = 0.31"))
        assert load_scenario(path).digest != synthetic20.digest

    def test_competitor_csv_round_trip(self, tmp_path):
        field = make_synthetic_field(3, 5, 100.0, 1.0, (2, 4), (100, 120), 1.5, seed=1)
        write_competitors(tmp_path / "c.csv", field)
        back = read_competitors(tmp_path / "c.csv")
        assert [t.ident for t in back] == [t.ident for t in field]
        assert back[1].lap_times == field[1].lap_times
        assert back[2].pit_laps == field[2].pit_laps and back[2].pit_durations == field[2].pit_durations

    def test_synthetic_field_is_reproducible(self):
        a = make_synthetic_field(4, 6, 100.0, 1.0, (2, 4), (100, 120), 1.5, seed=9)
        b = make_synthetic_field(4, 6, 100.0, 1.0, (2, 4), (100, 120), 1.5, seed=9)
        assert a == b

    def test_trace_validation(self):
        with pytest.raises(ScenarioError):
            CompetitorTrace("x", (100.0, -1.0))
        with pytest.raises(ScenarioError):
            CompetitorTrace("x", (100.0,), (3,), (10.0,))
        with pytest.raises(ScenarioError):
            CompetitorTrace("x", (100.0,), (1,), ())

    def test_trace_boundary_times(self):
        tr = CompetitorTrace("x", (10.0, 20.0), (1,), (5.0,), 1.0)
        arr, dep = tr.boundary_times([0.5, 0.5])
        assert arr == pytest.approx([1.0, 6.0, 11.0, 26.0, 36.0])
        assert dep == pytest.approx([1.0, 6.0, 16.0, 26.0, 36.0])


class TestResolution:
    def _ctx(self, p, kind=ATTACK):
        return InteractionContext(kind=kind, m=1, dt_p=0.3, t_gap_min=0.5, t_rl=0.3,
                                  probs=ProbabilityModel.constant(p))

    @pytest.mark.parametrize("p, outcome", [(0.9, "success"), (0.5, "success"), (0.4, "failure")])
    def test_overtake_rule(self, p, outcome):
        ctx = self._ctx(p)
        dec = ia.Decision(ATTACK, ia.OVERTAKE, 0.0, 1.0)
        t_end, got = resolve_interaction(dec, ctx, ctx.probs, t_free_end=100.0, t_comp_end=100.8)
        assert got == outcome
        assert t_end == pytest.approx(100.3 if outcome == "success" else 101.3)

    def test_pass_must_complete_in_the_sector(self):
        ctx = self._ctx(1.0)
        dec = ia.Decision(ATTACK, ia.OVERTAKE, 0.0, 1.0)
        assert resolve_interaction(dec, ctx, ctx.probs, 100.0, 100.2)[1] == "failure"

    @pytest.mark.parametrize("p, outcome", [(0.9, "success"), (0.4, "failure")])
    def test_block_rule(self, p, outcome):
        ctx = self._ctx(p, DEFEND)
        dec = ia.Decision(DEFEND, ia.BLOCK, 0.0, 1.0)
        t_end, got = resolve_interaction(dec, ctx, ctx.probs, 100.0, 99.0)
        assert got == outcome
        assert t_end == pytest.approx(100.3)

    def test_following_clamps_to_gap(self):
        ctx = self._ctx(0.5)
        for action in (ia.STAY_BEHIND, ia.LET_THROUGH):
            t_end, _ = resolve_interaction(ia.Decision(ATTACK, action, 0.0, 1.0), ctx, ctx.probs, 100.0, 100.2)
            assert t_end == pytest.approx(100.7)
            t_end, _ = resolve_interaction(ia.Decision(ATTACK, action, 0.0, 1.0), ctx, ctx.probs, 100.0, 90.0)
            assert t_end == 100.0


class TestRace:
    def test_free_flow_follows_the_plan(self, free_flow, synthetic20):
        _, lg = free_flow
        s = lg.summary
        assert s["interactions"] == 0 and s["cumulative_interaction_delay"] == 0.0
        assert abs(s["distance_laps"] - s["first_plan_objective_laps"]) <= 1.0 / synthetic20.n_ms
        assert s["finishing_position"] == 1

    def test_single_slow_car_is_passed_once(self, synthetic20):
        slow = CompetitorTrace("slow", (160.0,) * 20)
        sc = replace(synthetic20, competitors=[slow], probs=ProbabilityModel.constant(1.0, 1.0, synthetic20.n_ms))
        lg = run_race(sc, "optimal")
        events = [r for r in lg.ms_records if r["kind"]]
        assert [(r["action"], r["outcome"]) for r in events] == [(ia.OVERTAKE, "success")]
        assert lg.summary["finishing_position"] == 1

    def test_baseline_never_yields(self, race_logs):
        lg, _ = race_logs["baseline"]
        actions = {r["action"] for r in lg.ms_records if r["kind"]}
        assert actions and actions <= {ia.OVERTAKE, ia.BLOCK, ia.OUTLAP_OVERTAKE}

    def test_policies_agree_until_first_interaction(self, race_logs):
        a = race_logs["optimal"][0].ms_records
        b = race_logs["baseline"][0].ms_records
        first = min(next(i for i, r in enumerate(a) if r["kind"]), next(i for i, r in enumerate(b) if r["kind"]))
        assert first > 0
        assert a[:first] == b[:first]
        assert a[first]["t_start"] == b[first]["t_start"]

    def test_one_interaction_per_sector(self, race_logs):
        for lg, _ in race_logs.values():
            driven = [r["s"] for r in lg.ms_records if not r["stop"]]
            assert len(driven) == len(set(driven))
            for r in lg.ms_records:
                if r["kind"]:
                    assert r["kind"] in ia.KINDS and r["competitor"] and "," not in r["competitor"]

    def test_soc_conservation(self, race_logs, synthetic20):
        for lg, _ in race_logs.values():
            assert soc_reconstruction_error(lg, synthetic20.maps.charge) <= 1e-9

    def test_ego_time_never_goes_backwards(self, race_logs):
        for lg, _ in race_logs.values():
            t = [r["t_start"] for r in lg.ms_records]
            assert np.all(np.diff(t) > 0)
            assert all(r["t_end"] >= r["t_free"] - 10.0 for r in lg.ms_records)

    def test_positions_consistent(self, race_logs, tmp_path):
        lg, _ = race_logs["optimal"]
        lg.write(tmp_path)
        with open(tmp_path / "positions.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        assert header[:3] == ["s", "time", "ego"] and len(header) == 3 + len(lg.competitor_ids)
        by_key = {(int(r[0]), float(r[1])): r for r in body}
        recs = [r for r in lg.ms_records if not r["stop"]]
        assert len(by_key) == len(recs)
        for rec in recs:
            row = by_key[(rec["s"] - 1, rec["t_start"])]
            ego = float(row[2])
            standing = 1 + sum(1 for x in row[3:] if float(x) > ego + 1e-9)
            assert standing == rec["position"]

    def test_runs_are_byte_identical(self, synthetic20, race_logs, tmp_path):
        race_logs["optimal"][0].write(tmp_path / "a")
        run_race(synthetic20, "optimal").write(tmp_path / "b")
        for name in SCENARIO_FILES:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name

    def test_log_round_trip(self, race_logs, tmp_path):
        lg, _ = race_logs["optimal"]
        files = lg.write(tmp_path)
        assert set(files) == {"race_log", "laps", "positions", "summary", "timing"}
        back = RaceLog.read(tmp_path)
        assert back.summary == lg.summary
        assert len(back.ms_records) == len(lg.ms_records)
        assert float(back.ms_records[5]["t_end"]) == lg.ms_records[5]["t_end"]

    def test_toy_race_completes(self, toy_scenario):
        lg = run_race(toy_scenario, "optimal")
        assert lg.summary["distance_laps"] > 0
        assert soc_reconstruction_error(lg, toy_scenario.maps.charge) <= 1e-9

    def test_unknown_policy(self, synthetic20):
        with pytest.raises(ValueError):
            run_race(synthetic20, "random")
        assert POLICIES == ("optimal", "baseline")


class TestCompare:
    def test_identical_logs_have_no_gap(self, race_logs):
        lg, _ = race_logs["optimal"]
        cmp = compare(lg, lg)
        assert all(r["time_gap"] == 0.0 and r["dsoc"] == 0.0 for r in cmp.rows)
        assert cmp.summary["final_gap"] == 0.0

    def test_rejects_mixed_scenarios(self, race_logs, toy_scenario):
        other = run_race(toy_scenario, "optimal")
        with pytest.raises(ScenarioError):
            compare(race_logs["optimal"][0], other)

    def test_optimal_ahead_of_baseline(self, race_logs):
        cmp = compare(race_logs["optimal"][0], race_logs["baseline"][0])
        assert cmp.summary["final_gap"] > 0.0
        assert cmp.summary["delay_a"] <= cmp.summary["delay_b"]
        assert cmp.csv().splitlines()[0].startswith("lap,t_a,t_b,time_gap")
        assert len(cmp.rows) >= 19

    def test_works_on_logs_read_back(self, race_logs, tmp_path):
        race_logs["optimal"][0].write(tmp_path / "a")
        race_logs["baseline"][0].write(tmp_path / "b")
        direct = compare(race_logs["optimal"][0], race_logs["baseline"][0])
        back = compare(RaceLog.read(tmp_path / "a"), RaceLog.read(tmp_path / "b"))
        assert back.summary == direct.summary
