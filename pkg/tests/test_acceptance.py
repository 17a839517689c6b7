import pytest

from heatctrl.config import Config
from heatctrl.control import ControlBounds
from heatctrl.harness import StudySpec, run_control_convergence, run_state_convergence

pytestmark = pytest.mark.slow


class TestStateRates:
    """Ordres de convergence de l'équation d'état (plusieurs minutes)"""

    async def test_time_rate(self):
        """Test ordre >= 0.9 en k, n = 32 fixé, contre M = 1024"""
        spec = StudySpec("smooth-inhomogeneous", "time", Config.TIME_LEVELS, reference=Config.TIME_REFERENCE,
                         fixed_n=Config.TIME_FIXED_N)
        report = await run_state_convergence(spec)
        assert report.fitted_state >= 0.9

    async def test_space_rate_without_coupling(self):
        """Test ordre >= 0.9 en h, M = 512 fixé pour tous les niveaux, contre n = 64"""
        spec = StudySpec("smooth-inhomogeneous", "space", Config.SPACE_LEVELS, reference=Config.SPACE_REFERENCE,
                         fixed_M=Config.SPACE_FIXED_M)
        report = await run_state_convergence(spec)
        assert {row.M for row in report.rows} == {Config.SPACE_FIXED_M}
        assert report.fitted_state >= 0.9


class TestControlRates:
    """Ordres de convergence du contrôle optimal avec contraintes actives"""

    async def test_space_rate(self):
        """Test ordre >= 0.45 en h pour le contrôle"""
        spec = StudySpec("control-active", "space", Config.CONTROL_SPACE_LEVELS, reference=Config.CONTROL_SPACE_REFERENCE,
                         fixed_M=Config.CONTROL_SPACE_FIXED_M,
                         bounds=ControlBounds(*Config.DEFAULT_BOUNDS), tol=1e-8, max_iters=2000)
        report = await run_control_convergence(spec)
        assert report.fitted_control >= 0.45

    async def test_time_rate(self):
        """Test ordre >= 0.20 en k pour le contrôle"""
        spec = StudySpec("control-active", "time", Config.CONTROL_TIME_LEVELS, reference=Config.CONTROL_TIME_REFERENCE,
                         fixed_n=Config.CONTROL_TIME_FIXED_N,
                         bounds=ControlBounds(*Config.DEFAULT_BOUNDS), tol=1e-8, max_iters=2000)
        report = await run_control_convergence(spec)
        assert report.fitted_control >= 0.20
