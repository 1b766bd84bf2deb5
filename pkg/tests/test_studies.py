import math

import numpy as np
import pytest

from services.controls import FREQUENCY
from services.densemath import CNOT, unitarity_defect
from services.optimize import CONVERGED, goat_optimize
from services.propagation import propagate, reference_propagate
from services.studies import (
    BenchmarkProblemSpec, DimStudySpec, PwcStudySpec, benchmark_problem, dim_trial_problem,
    fit_slope, run_dim_study, run_goat_vs_nm, run_high_accuracy_cnot, run_pwc_study, spec_to_dict,
)


def test_fit_slope_recovers_power_law():
    slices = [10, 100, 1000, 10000]
    assert fit_slope(slices, [n ** -2.0 for n in slices]) == pytest.approx(-2.0)
    # only points at or above the asymptotic start count
    errors = [1.0, 1e-2, 1e-3, 1e-4]
    assert fit_slope(slices, errors, asymptotic_from=100) == pytest.approx(-1.0)


def test_fit_slope_ignores_the_noise_floor():
    assert fit_slope([10, 100, 1000], [1e-4, 1e-14, 1e-15]) is None


def test_pwc_spec_validation():
    with pytest.raises(ValueError):
        PwcStudySpec(slice_counts=(100, 10))
    with pytest.raises(ValueError):
        PwcStudySpec(sampling_rules=("end",))
    with pytest.raises(ValueError):
        PwcStudySpec(task="unitary")


def test_default_slice_counts_span_ten_to_a_million():
    counts = PwcStudySpec().slice_counts
    assert counts[0] == 10 and counts[-1] == 10 ** 6
    assert len(counts) == 11


def test_small_pwc_study_table_and_slopes():
    spec = PwcStudySpec(qubits=1, n_controls=1, n_terms=2, slice_counts=(10, 100, 1000),
                        reference_tolerance=1e-12, asymptotic_from=100, error_target=1e-30)
    result = run_pwc_study(spec)
    assert result.columns == ["slices", "sampling", "g_pwc", "relative_error", "seconds", "error"]
    assert len(result.rows) == 6
    assert all(row["error"] == "" for row in result.rows)
    midpoint = [row["relative_error"] for row in result.rows if row["sampling"] == "midpoint"]
    assert midpoint[2] < midpoint[0]
    assert result.summary["slope_midpoint"] < -1.5
    assert result.summary["slope_start"] < -0.5
    assert result.summary["slices_to_target_midpoint"] is None


def test_dim_trial_problem_is_seeded():
    spec = DimStudySpec(seed=3)
    first = dim_trial_problem(spec, 2, 2, 0)
    again = dim_trial_problem(spec, 2, 2, 0)
    other = dim_trial_problem(spec, 2, 2, 1)
    assert np.array_equal(first.initial_parameters, again.initial_parameters)
    assert np.array_equal(first.hamiltonian.drift, again.hamiltonian.drift)
    assert not np.array_equal(first.hamiltonian.drift, other.hamiltonian.drift)


@pytest.mark.parametrize("parametrization", ["fourier-amplitudes", "pwc", "pwc-flexible"])
@pytest.mark.parametrize("control_dim", [1, 2, 3, 4])
def test_control_dimension_counts_trainable_slots(parametrization, control_dim):
    spec = DimStudySpec(parametrization=parametrization)
    problem = dim_trial_problem(spec, 2, control_dim, 0)
    assert problem.ansatz.n_trainable == control_dim


def test_dim_spec_validation():
    with pytest.raises(ValueError):
        DimStudySpec(trials=0)
    with pytest.raises(ValueError):
        DimStudySpec(restarts=0)
    with pytest.raises(ValueError):
        DimStudySpec(parametrization="splines")
    with pytest.raises(ValueError):
        DimStudySpec(hilbert_dims=(1,))


def test_smallest_dim_study_counts():
    spec = DimStudySpec(hilbert_dims=(2,), control_dims=(1, 2), trials=2, restarts=2, max_iterations=50)
    result = run_dim_study(spec)
    assert [row["control_dim"] for row in result.rows] == [1, 2]
    for row in result.rows:
        assert isinstance(row["successes"], int)
        assert 0 <= row["successes"] <= row["trials"] == 2
        assert 0.0 <= row["success_fraction"] <= 1.0
        assert 0.0 <= row["mean_starts"] <= 2.0


def test_ising_benchmark_problem():
    problem = benchmark_problem(BenchmarkProblemSpec(name="ising-cnot"))
    assert problem.hamiltonian.dim == 4
    assert problem.ansatz.n_parameters == 48
    assert problem.ansatz.n_trainable == 32
    assert np.array_equal(problem.goal.target, CNOT)
    _, frequencies, _ = problem.ansatz.unpack(problem.initial_parameters)
    assert frequencies[0] == pytest.approx([2 * math.pi * j / 4.0 for j in range(1, 5)])


def test_nv_standin_problem_trains_everything():
    problem = benchmark_problem(BenchmarkProblemSpec(name="nv-cnot-standin"))
    assert problem.ansatz.n_controls == 2
    assert problem.ansatz.n_trainable == problem.ansatz.n_parameters == 30
    assert problem.ansatz.kind_mask([FREQUENCY]).sum() == 10


def test_benchmark_spec_validation():
    with pytest.raises(ValueError):
        BenchmarkProblemSpec(name="problem-15")
    with pytest.raises(ValueError):
        BenchmarkProblemSpec(starts=0)


def test_benchmark_start_is_seeded():
    first = benchmark_problem(BenchmarkProblemSpec(seed=2))
    second = benchmark_problem(BenchmarkProblemSpec(seed=2))
    assert np.array_equal(first.initial_parameters, second.initial_parameters)


def test_goat_vs_nm_share_the_initial_value():
    spec = BenchmarkProblemSpec(name="ising-cnot", n_terms=1, max_iterations=3, nm_time_factor=1.0)
    result = run_goat_vs_nm(spec)
    assert result.summary["initial_g_goat"] == pytest.approx(result.summary["initial_g_nelder_mead"], abs=1e-15)
    assert [row["threshold"] for row in result.rows] == [1e-2, 1e-4, 1e-6, 1e-8, 1e-10]
    assert set(result.traces) == {"goat", "nelder-mead"}


def test_high_accuracy_cnot_reports_pulses():
    spec = BenchmarkProblemSpec(name="nv-cnot-standin", threshold=1e-3, max_iterations=2, starts=1,
                                pulse_samples=11)
    result = run_high_accuracy_cnot(spec)
    pulses = result.extras["pulses"]
    assert len(pulses) == 11
    assert set(pulses[0]) == {"t", "c0", "c1"}
    assert result.summary["starts_used"] == 1
    assert len(result.summary["parameters"]) == 30
    assert result.rows[0]["iteration"] == 0
    assert result.summary["reference"]["method"] == "RK45"
    # 1e-14 is below the integrator floor and gets raised to it
    assert result.summary["reference"]["rtol"] == pytest.approx(100 * np.finfo(float).eps)


def test_spec_to_dict_lists_tuples():
    data = spec_to_dict(DimStudySpec(control_dims=(1, 2)))
    assert data["control_dims"] == [1, 2]
    assert data["parametrization"] == "fourier-amplitudes"


@pytest.mark.slow
def test_pwc_study_midpoint_slope_and_slice_count():
    result = run_pwc_study(PwcStudySpec())
    assert result.summary["slope_start"] == pytest.approx(-1.0, abs=0.2)
    assert result.summary["slope_midpoint"] == pytest.approx(-2.0, abs=0.2)
    assert 10 ** 4 <= result.summary["slices_to_target_midpoint"] <= 10 ** 6


@pytest.mark.slow
def test_state_transfer_needs_two_controls_for_a_qubit():
    result = run_dim_study(DimStudySpec(hilbert_dims=(2,), control_dims=(1, 2), trials=20))
    below, at = result.rows
    assert below["success_fraction"] <= 0.5
    assert at["success_fraction"] >= 0.9


@pytest.mark.slow
def test_state_transfer_in_a_qutrit_needs_four_controls():
    result = run_dim_study(DimStudySpec(hilbert_dims=(3,), control_dims=(3, 4), trials=20, workers=4))
    below, at = result.rows
    assert below["success_fraction"] <= 0.5
    assert at["success_fraction"] >= 0.9


@pytest.mark.slow
@pytest.mark.parametrize("parametrization", ["fourier-amplitudes", "pwc"])
def test_qubit_gate_is_reached_with_four_controls(parametrization):
    # gate cells below d^2 are not asserted: the phase-blind goal lives on d^2 - 1 dimensions
    spec = DimStudySpec(task="gate", hilbert_dims=(2,), control_dims=(4,), trials=20,
                        parametrization=parametrization, max_iterations=400, workers=4)
    (row,) = run_dim_study(spec).rows
    assert row["success_fraction"] >= 0.9


@pytest.mark.slow
def test_ising_cnot_reaches_threshold():
    problem = benchmark_problem(BenchmarkProblemSpec(name="ising-cnot"))
    trace = goat_optimize(problem)
    assert trace.status == CONVERGED
    final = propagate(problem.hamiltonian, problem.ansatz, trace.parameters, problem.duration).propagator
    assert unitarity_defect(final) < 1e-10


@pytest.mark.slow
def test_nelder_mead_lags_behind_goat():
    result = run_goat_vs_nm(BenchmarkProblemSpec(name="ising-cnot"))
    assert result.summary["goat_g"] <= 1e-10
    assert result.summary["nelder_mead_g"] > 1e-6


@pytest.mark.slow
def test_high_accuracy_cnot_is_verified_by_the_reference():
    result = run_high_accuracy_cnot(BenchmarkProblemSpec(name="nv-cnot-standin", threshold=1e-12,
                                                         max_iterations=2000, starts=20))
    assert result.summary["g"] <= 1e-12
    assert result.summary["g_reference"] <= 1e-12
    problem = benchmark_problem(BenchmarkProblemSpec(name="nv-cnot-standin"))
    reference = reference_propagate(problem.hamiltonian, problem.ansatz,
                                    np.array(result.summary["parameters"]), problem.duration, tolerance=1e-14)
    assert unitarity_defect(reference) < 1e-10
