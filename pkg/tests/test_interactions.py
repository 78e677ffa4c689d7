import math

import numpy as np
import pytest

import enduro.interactions as ia
from enduro.interactions import (ATTACK, BLOCK, BOX, DEFEND, LET_THROUGH, OUTLAP_OVERTAKE, OVERTAKE, PIT_EXIT,
                                 SHORT_PIT_STOP, STAY_BEHIND, CarState, ChargeSensitivity, Decision,
                                 InteractionContext, ProbabilityModel, box_time_penalty, choose_action, decide,
                                 detect_interaction, evaluate_box, make_mini_sectors, optimize_penalty,
                                 penalty_block, penalty_let_through, penalty_overtake, penalty_short_pitstop,
                                 penalty_stay_behind, update_sb_buffer)
from enduro.models import ChargeModel, LapTimeMap, MsTradeoffCurve, eval_lap_time
from enduro.strategy import EgoMeasurement, advance_measurement, solve_strategy
from oracles import direct_block, direct_let_through, direct_overtake, direct_short_pit, direct_stay_behind

SPEND = 1.0e-4  # s of MS time gained per J


def linear_curve(rate=SPEND, lo=-2.0e4, hi=2.0e4, m=1):
    return MsTradeoffCurve(m, np.array([[-rate, 0.0]]), (lo, hi), 12.0, 1.0e5)


def ctx_of(kind=ATTACK, p=0.5, charge_rate=0.0, **kw):
    probs = ProbabilityModel.constant(p)
    return InteractionContext(kind=kind, m=1, probs=probs, curve=kw.pop("curve", linear_curve()),
                              charge_delta=lambda de: charge_rate * de, **kw)


class TestFixtures:
    def test_overtake_example(self):
        ctx = ctx_of(dt_p=0.4, t_gap_min=0.6, t_rl=0.3, charge_rate=0.5 / 6000.0)
        assert ctx.dt_d(6000.0) == pytest.approx(1.0, abs=1e-12)
        assert penalty_overtake(ctx, 6000.0) == pytest.approx(2.0, abs=1e-12)

    def test_stay_behind_example(self):
        ctx = ctx_of(dt_p=0.4, t_gap_min=0.6, dt_p_next=0.3, charge_rate=0.2 / 2000.0)
        assert penalty_stay_behind(ctx, -2000.0) == pytest.approx(1.1, abs=1e-12)

    def test_block_example(self):
        ctx = ctx_of(DEFEND, dt_p=-0.2, t_gap_min=0.6, t_rl=0.3, charge_rate=0.4 / 7000.0)
        assert ctx.dt_d(7000.0) == pytest.approx(0.5, abs=1e-12)
        assert penalty_block(ctx, 7000.0) == pytest.approx(1.3, abs=1e-12)

    def test_let_through_example(self):
        ctx = ctx_of(DEFEND, dt_p=-0.8, t_gap_min=0.6, t_target=(12.2, 11.2, 13.2), t_ms_plan=(12.0, 11.0, 13.0))
        assert penalty_let_through(ctx, 0.0) == pytest.approx(0.6, abs=1e-12)

    def test_let_through_nothing_lost(self):
        ctx = ctx_of(DEFEND, dt_p=-0.8, t_gap_min=0.6, t_target=(12.0, 11.0), t_ms_plan=(12.0, 11.0))
        assert penalty_let_through(ctx, 0.0) == 0.0

    def test_short_pit_affine_map(self):
        lap_map = LapTimeMap("base", np.array([[-2.0, 150.0]]), (20.0, 80.0))
        dbar = (40.0,) * 5
        tbar = tuple(float(eval_lap_time(lap_map, d)) for d in dbar)
        ctx = ctx_of(PIT_EXIT, dt_p=0.0, lap_map=lap_map, dt_charge_bar=dbar, t_lap_bar=tbar, dt_charge_sp=1.0)
        assert penalty_short_pitstop(ctx) == pytest.approx(2.0, abs=1e-12)

    def test_short_pit_convex_map_above_affine_bound(self):
        lap_map = LapTimeMap("base", np.array([[-3.0, 200.0], [-2.0, 160.0], [-1.0, 115.0]]), (20.0, 80.0))
        dbar = (42.0, 40.5, 39.0, 41.0)
        tbar = tuple(float(eval_lap_time(lap_map, d)) for d in dbar)
        ctx = ctx_of(PIT_EXIT, dt_p=0.0, lap_map=lap_map, dt_charge_bar=dbar, t_lap_bar=tbar, dt_charge_sp=6.0)
        # the shallowest slope active at the reference budgets bounds the cost from below
        slope = min(abs(max(lap_map.pieces, key=lambda r: r[0] * d + r[1])[0]) for d in dbar)
        assert penalty_short_pitstop(ctx) >= slope * 6.0 - 1e-12

    def test_short_pit_out_of_domain(self):
        lap_map = LapTimeMap("base", np.array([[-2.0, 150.0]]), (20.0, 80.0))
        ctx = ctx_of(PIT_EXIT, dt_p=0.0, lap_map=lap_map, dt_charge_bar=(21.0,), t_lap_bar=(108.0,),
                     dt_charge_sp=5.0)
        assert penalty_short_pitstop(ctx) == math.inf


class TestDegeneracies:
    def test_sure_overtake_at_planned_gap_costs_charge_and_line(self):
        ctx = ctx_of(p=1.0, dt_p=0.37, t_gap_min=0.6, t_rl=0.25, charge_rate=0.0, curve=None)
        assert penalty_overtake(ctx, 0.0) == 0.25
        ctx = ctx_of(p=1.0, dt_p=0.37, t_gap_min=0.6, t_rl=0.25, charge_rate=1e-5,
                     curve=linear_curve(rate=0.0))
        assert penalty_overtake(ctx, 3000.0) == pytest.approx(0.03 + 0.25, rel=1e-15)

    def test_block_loss_vanishes_when_far_behind(self):
        for dt_p in (-0.6, -0.9, -3.0):
            ctx = ctx_of(DEFEND, p=0.3, dt_p=dt_p, t_gap_min=0.6, t_rl=0.1, curve=None)
            # only the charge/line cost and the gain term remain
            assert penalty_block(ctx, 0.0) == pytest.approx((0.1 - dt_p * 0.3) / 0.3, rel=1e-15)

    def test_block_sure_defence(self):
        ctx = ctx_of(DEFEND, p=1.0, dt_p=0.2, t_gap_min=0.6, t_rl=0.3, charge_rate=0.4 / 7000.0)
        assert penalty_block(ctx, 7000.0) == pytest.approx(0.4 + 0.3 - ctx.dt_d(7000.0), abs=1e-15)

    def test_no_short_pit_shortfall_no_penalty(self):
        lap_map = LapTimeMap("base", np.array([[-2.0, 150.0]]), (20.0, 80.0))
        ctx = ctx_of(PIT_EXIT, dt_p=0.0, lap_map=lap_map, dt_charge_bar=(40.0, 41.0), t_lap_bar=(1.0, 2.0),
                     dt_charge_sp=0.0)
        assert penalty_short_pitstop(ctx) == 0.0

    def test_all_zero_stay_behind(self):
        ctx = InteractionContext(kind=ATTACK, m=1, dt_p=0.0, t_gap_min=1e-300)
        assert penalty_stay_behind(ctx, 0.0) == pytest.approx(0.0, abs=1e-299)

    def test_unlikely_overtake_is_expensive(self):
        ctx = InteractionContext(kind=ATTACK, m=1, dt_p=0.1, t_gap_min=0.5, t_rl=0.2,
                                 probs=ProbabilityModel.constant(0.0))
        assert penalty_overtake(ctx, 0.0) > 100.0
        assert math.isfinite(penalty_overtake(ctx, 0.0))


class TestRandomOracle:
    def test_thousand_contexts(self):
        rng = np.random.default_rng(2024)
        lap_map = LapTimeMap("base", np.array([[-3.0, 200.0], [-2.0, 160.0], [-1.0, 115.0]]), (20.0, 80.0))
        for _ in range(1000):
            dt_p, dt_p_next = rng.uniform(-3.0, 3.0, 2)
            gmin, t_rl, buf = rng.uniform(0.05, 1.5), rng.uniform(0.0, 1.0), rng.uniform(0.0, 5.0)
            p_ov, p_def = rng.uniform(1e-3, 1.0, 2)
            rate, crate = rng.uniform(1e-6, 1e-4), rng.uniform(1e-6, 1e-4)
            de_up, de_down = rng.uniform(0.0, 2.0e4), rng.uniform(-2.0e4, 0.0)
            k = int(rng.integers(1, 4))
            targets, plans = rng.uniform(10.0, 14.0, (2, k))
            n = int(rng.integers(1, 8))
            dbar = rng.uniform(35.0, 75.0, n)
            tbar = rng.uniform(100.0, 130.0, n)
            dsp = rng.uniform(0.0, 10.0)
            ctx = InteractionContext(
                kind=ATTACK, m=1, dt_p=dt_p, dt_p_next=dt_p_next, t_gap_min=gmin, t_rl=t_rl, t_buff_sb=buf,
                probs=ProbabilityModel.constant(p_ov, p_def), curve=linear_curve(rate),
                charge_delta=lambda de, c=crate: c * de, t_target=tuple(targets), t_ms_plan=tuple(plans),
                lap_map=lap_map, dt_charge_bar=tuple(dbar), t_lap_bar=tuple(tbar), dt_charge_sp=dsp)
            dt_d = dt_p + rate * de_up
            checks = [
                (penalty_overtake(ctx, de_up), direct_overtake(crate * de_up, t_rl, dt_d, dt_p, gmin, p_ov)),
                (penalty_stay_behind(ctx, de_down), direct_stay_behind(crate * de_down, dt_p, gmin, buf, dt_p_next)),
                (penalty_block(ctx, de_up), direct_block(crate * de_up, t_rl, dt_d, dt_p, gmin, p_def)),
                (penalty_let_through(ctx, de_down),
                 direct_let_through(gmin, dt_p, targets, plans, [crate * de_down / k] * k)),
                (penalty_short_pitstop(ctx),
                 direct_short_pit(lap_map.pieces[:, 0], lap_map.pieces[:, 1], dbar, tbar, dsp)),
            ]
            obj_u, obj_f, s_lap, t_ref = rng.uniform(1e4, 1e5), rng.uniform(1e4, 1e5), 4259.0, 110.0
            checks.append((box_time_penalty(obj_u, obj_f, s_lap, t_ref), (obj_u - obj_f) / s_lap * t_ref))
            for got, ref in checks:
                assert got == pytest.approx(ref, rel=1e-12, abs=1e-12)


class TestBuffer:
    def test_single_step(self):
        assert update_sb_buffer(0.0, Decision(ATTACK, STAY_BEHIND, 0.0, 1.1)) == 1.1

    def test_other_actions_reset(self):
        for action in (OVERTAKE, BOX, BLOCK, LET_THROUGH):
            assert update_sb_buffer(3.0, Decision(ATTACK, action, 0.0, 1.0)) == 0.0

    def test_recursion_matches_closed_form(self):
        ctx = ctx_of(dt_p=0.4, t_gap_min=0.6, dt_p_next=0.3)
        base = penalty_stay_behind(ctx, 0.0)
        buf, history = 0.0, []
        for k in range(1, 7):
            pen = penalty_stay_behind(ctx.__class__(**{**ctx.__dict__, "t_buff_sb": buf}), 0.0)
            buf = update_sb_buffer(buf, Decision(ATTACK, STAY_BEHIND, 0.0, pen))
            history.append(buf)
            # b_k = b_{k-1} + (c + b_{k-1})  =>  b_k = c (2**k - 1)
            assert buf == pytest.approx(base * (2 ** k - 1), rel=1e-12)
        assert np.all(np.diff(history) > 0)

    def test_second_penalty_includes_first(self):
        ctx = ctx_of(dt_p=0.4, t_gap_min=0.6, dt_p_next=0.3)
        first = penalty_stay_behind(ctx, 0.0)
        buf = update_sb_buffer(0.0, Decision(ATTACK, STAY_BEHIND, 0.0, first))
        second = penalty_stay_behind(ctx.__class__(**{**ctx.__dict__, "t_buff_sb": buf}), 0.0)
        assert second == pytest.approx(2 * first)

    def test_negative_penalty_does_not_grow_buffer(self):
        assert update_sb_buffer(0.5, Decision(ATTACK, STAY_BEHIND, 0.0, -0.8)) == 0.5


class TestChoice:
    def test_attack_example(self):
        dec = choose_action(ATTACK, {OVERTAKE: 2.0, STAY_BEHIND: 1.1})
        assert dec.action == STAY_BEHIND and dec.penalty == 1.1
        assert dec.table == {OVERTAKE: 2.0, STAY_BEHIND: 1.1}

    def test_ties_follow_rank(self):
        assert choose_action(ATTACK, {OVERTAKE: 1.0, STAY_BEHIND: 1.0}).action == STAY_BEHIND
        assert choose_action(DEFEND, {BLOCK: 1.0, LET_THROUGH: 1.0, BOX: 1.0}).action == LET_THROUGH
        assert choose_action(ATTACK, {OVERTAKE: 0.5, BOX: 0.5}).action == OVERTAKE
        assert choose_action(PIT_EXIT, {SHORT_PIT_STOP: 0.0, OUTLAP_OVERTAKE: 0.0}).action == OUTLAP_OVERTAKE

    def test_single_action(self):
        assert choose_action(DEFEND, {BOX: 7.0}).action == BOX

    def test_argmin_over_random_tables(self):
        rng = np.random.default_rng(9)
        for _ in range(200):
            vals = np.round(rng.normal(size=3), 1)
            table = dict(zip((OVERTAKE, STAY_BEHIND, BOX), vals))
            dec = choose_action(ATTACK, table)
            assert all(dec.penalty <= v for v in table.values())

    def test_rejects_foreign_actions(self):
        with pytest.raises(ValueError):
            choose_action(ATTACK, {BLOCK: 1.0})
        with pytest.raises(ValueError):
            choose_action(ATTACK, {})

    def test_decide_without_reinteraction_lets_through(self):
        ctx = ctx_of(DEFEND, p=1.0, dt_p=-0.2, t_gap_min=0.6, t_target=(13.0,) * 3, t_ms_plan=(12.0,) * 3,
                     reinteraction=False)
        dec = decide(ctx, box_penalty=-100.0)
        assert dec.action == LET_THROUGH
        assert BLOCK in dec.table

    def test_box_only_when_offered(self):
        ctx = ctx_of(dt_p=0.4, t_gap_min=0.6)
        assert BOX not in decide(ctx).table
        assert decide(ctx, box_penalty=-5.0).action == BOX
        assert BOX not in decide(ctx, box_penalty=math.inf).table

    def test_baseline_always_attacks(self):
        assert ia.baseline_decision(ctx_of(dt_p=0.4)).action == OVERTAKE
        assert ia.baseline_decision(ctx_of(DEFEND, dt_p=-0.4, t_target=(1.0,), t_ms_plan=(1.0,))).action == BLOCK


class TestOptimizer:
    def test_not_worse_than_grid(self):
        rng = np.random.default_rng(4)
        probs = ProbabilityModel.logistic(n_ms=1)
        for _ in range(50):
            ctx = InteractionContext(kind=ATTACK, m=1, dt_p=float(rng.uniform(-1.0, 1.0)), t_gap_min=0.5,
                                     t_rl=0.2, probs=probs, curve=linear_curve(float(rng.uniform(1e-5, 2e-4))),
                                     charge_delta=lambda de, c=float(rng.uniform(1e-6, 1e-4)): c * de)
            de, pen = optimize_penalty(OVERTAKE, ctx)
            lo, hi = ia.energy_window(OVERTAKE, ctx)
            grid = [penalty_overtake(ctx, float(x)) for x in np.linspace(lo, hi, ia.GRID_POINTS)]
            assert pen <= min(grid) + 1e-15
            assert pen == pytest.approx(penalty_overtake(ctx, de), rel=1e-15)

    def test_interior_optimum(self):
        probs = ProbabilityModel.logistic(n_ms=1, width=0.3, center_ov=0.3)
        ctx = InteractionContext(kind=ATTACK, m=1, dt_p=0.0, t_gap_min=0.5, t_rl=0.1, probs=probs,
                                 curve=linear_curve(1e-4), charge_delta=lambda de: 1.5e-4 * de)
        de, pen = optimize_penalty(OVERTAKE, ctx)
        fine = np.linspace(0.0, 2.0e4, 200001)
        vals = np.array([penalty_overtake(ctx, float(x)) for x in fine])
        assert 0.0 < de < 2.0e4
        assert pen <= vals.min() + 1e-6
        assert de == pytest.approx(fine[int(np.argmin(vals))], abs=1.0)

    def test_flat_tables_no_spend_for_stay_behind(self):
        de, _ = optimize_penalty(STAY_BEHIND, ctx_of(dt_p=0.4, charge_rate=1e-5))
        assert de == 0.0

    def test_deterministic(self):
        ctx = ctx_of(dt_p=0.1, t_gap_min=0.5, charge_rate=1e-5, de_sb_min=-5000.0)
        assert optimize_penalty(STAY_BEHIND, ctx) == optimize_penalty(STAY_BEHIND, ctx)

    def test_energy_saving_window(self):
        ctx = ctx_of(dt_p=0.1, t_gap_min=0.5, charge_rate=1e-5, de_sb_min=-5000.0)
        de, pen = optimize_penalty(STAY_BEHIND, ctx)
        assert de == pytest.approx(-5000.0)
        assert pen == pytest.approx(penalty_stay_behind(ctx, -5000.0))


class TestDetection:
    def test_nobody_near(self):
        cars = [CarState("far", 3.0, 500.0, 512.0)]
        assert detect_interaction(2.0, 110.0, 122.0, cars, horizon=12.0) is None

    def test_virtual_pass_of_slower_leader(self):
        # ego covers the MS in 10 s, the car 1 s ahead needs 12 s
        cars = [CarState("lead", 2.01, 1.0 + 12.0, 1.0 + 24.0)]
        kind, car, dt_p, dt_p_next = detect_interaction(2.0, 10.0, 20.0, cars, horizon=12.0)
        assert (kind, car.ident) == (ATTACK, "lead")
        assert dt_p == pytest.approx(3.0) and dt_p_next == pytest.approx(5.0)

    def test_faster_follower(self):
        cars = [CarState("chase", 1.99, 10.0, 20.0)]
        kind, car, dt_p, _ = detect_interaction(2.0, 12.0, 24.0, cars, horizon=12.0)
        assert (kind, car.ident) == (DEFEND, "chase")
        assert dt_p == pytest.approx(-2.0)

    def test_margin_catches_a_car_just_ahead(self):
        cars = [CarState("lead", 2.01, 12.3, 24.3)]
        assert detect_interaction(2.0, 12.0, 24.0, cars, horizon=12.0) == (ATTACK, cars[0], pytest.approx(0.3),
                                                                          pytest.approx(0.3))
        cars = [CarState("lead", 2.01, 11.8, 23.8)]
        assert detect_interaction(2.0, 12.0, 24.0, cars, horizon=12.0) is None
        assert detect_interaction(2.0, 12.0, 24.0, cars, horizon=12.0, margin=0.5)[0] == ATTACK

    def test_attack_precedes_and_closest_wins(self):
        cars = [CarState("chase", 1.99, 10.0, 20.0), CarState("far", 2.05, 14.0, 26.0),
                CarState("near", 2.02, 13.0, 25.0)]
        kind, car, _, _ = detect_interaction(2.0, 12.0, 24.0, cars, horizon=12.0)
        assert (kind, car.ident) == (ATTACK, "near")
        kind, car, _, _ = detect_interaction(2.0, 12.0, 24.0, cars, horizon=12.0, skip=("near", "far"))
        assert (kind, car.ident) == (DEFEND, "chase")


class TestProbabilityModel:
    def test_floor_and_interpolation(self):
        pm = ProbabilityModel(np.array([0.0, 1.0]), np.array([[0.0, 0.8]]), np.array([[0.5, 0.5]]))
        assert pm.p_overtake(-1.0, 1) == ia.P_FLOOR
        assert pm.p_overtake(0.5, 1) == pytest.approx(0.4)
        assert pm.p_overtake(9.0, 1) == pytest.approx(0.8)

    def test_rejects_bad_tables(self):
        with pytest.raises(ValueError):
            ProbabilityModel(np.array([0.0, 1.0]), np.array([[0.8, 0.2]]), np.array([[0.5, 0.5]]))
        with pytest.raises(ValueError):
            ProbabilityModel(np.array([0.0, 1.0]), np.array([[0.2, 1.2]]), np.array([[0.5, 0.5]]))

    def test_csv_round_trip(self, tmp_path):
        pm = ProbabilityModel.logistic(n_ms=3, ov_scale=[1.0, 0.4, 0.8])
        pm.to_csv(tmp_path / "p.csv")
        back = ia.load_probability_table(tmp_path / "p.csv")
        assert np.array_equal(back.p_ov, pm.p_ov) and np.array_equal(back.p_def, pm.p_def)

    def test_mini_sectors_cover_the_lap(self):
        ms = make_mini_sectors([0.25, 0.5, 0.25])
        assert ms[0].start == 0.0 and ms[-1].end == pytest.approx(1.0)
        assert all(a.end == pytest.approx(b.start) for a, b in zip(ms, ms[1:]))
        with pytest.raises(ValueError):
            make_mini_sectors([0.5, 0.6])


class TestChargeSensitivity:
    def test_zero_at_zero_and_sign(self):
        cs = ChargeSensitivity(ChargeModel(0.0, 1.0e6, ((0.0, 1.0e5),)), 5.0e5)
        assert cs(0.0) == 0.0
        assert cs(1.0e4) == pytest.approx(0.1)
        assert cs(-1.0e4) == pytest.approx(-0.1)


@pytest.fixture(scope="module")
def before_stop(synthetic20):
    """Undisturbed plan walked forward until two laps remain in the stint."""
    maps, cfg = synthetic20.maps, synthetic20.config
    meas = EgoMeasurement(0.0, 0.0)
    plan = solve_strategy(meas, cfg, maps)
    while plan.driven_laps > 2:
        meas = advance_measurement(plan, meas)
        cfg = cfg.replace(n_laps=cfg.n_laps - 1)
        plan = solve_strategy(meas, cfg, maps)
    assert plan.pits_after_current
    return meas, cfg, maps, plan


class TestBox:
    def _penalty(self, before_stop, delay):
        meas, cfg, maps, plan = before_stop
        unforced = solve_strategy(EgoMeasurement(meas.t_meas + delay, meas.t_fc_meas), cfg, maps)
        return evaluate_box(meas, cfg, maps, unforced.objective, float(plan.t_lap_ref[-2]), unforced)

    def test_undisturbed_stop_early_costs(self, before_stop):
        assert self._penalty(before_stop, 0.0) > 0.0

    def test_undercut_behind_slow_car_pays(self, before_stop):
        assert self._penalty(before_stop, 5.0) < 0.0

    def test_early_race_box_not_chosen(self, synthetic20):
        meas = EgoMeasurement(0.0, 0.0)
        plan = solve_strategy(meas, synthetic20.config, synthetic20.maps)
        pen = evaluate_box(meas, synthetic20.config, synthetic20.maps, plan.objective, 110.0, plan)
        assert pen > 0.0

    def test_already_pitting_is_free(self, toy):
        from enduro.strategy import RaceConfig
        cfg = RaceConfig(t_race=200.0, s_lap=1000.0, n_stops=2, n_laps=1)
        meas = EgoMeasurement(100.0, 8.0)
        plan = solve_strategy(meas, cfg, toy)
        assert plan.pits_after_current and plan.driven_laps == 1
        assert evaluate_box(meas, cfg, toy, plan.objective, 5.0, plan) == 0.0
