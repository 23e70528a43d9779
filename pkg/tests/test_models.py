"""
Tests for domain models in src/models.py.

This module tests dataclass validation, serialization/deserialization,
and derived kinematics of the domain models.
"""

import math

import numpy as np
import pytest

from src.models import (
    OBS_DIM,
    Branch,
    ConflictEvent,
    EpisodeLog,
    EpisodeReport,
    HybridAction,
    Observation,
    ObservationScales,
    RewardBreakdown,
    StepEvents,
    TrajectoryRecord,
    VehicleClass,
    VehicleState,
)


class TestVehicleState:
    """Tests for VehicleState model."""

    def test_velocity_components(self, make_vehicle):
        """Test heading pi/2 points the velocity along +y."""
        vehicle = make_vehicle(speed=10.0, acceleration=2.0, heading=math.pi / 2)
        assert vehicle.v_x == pytest.approx(0.0, abs=1e-12)
        assert vehicle.v_y == pytest.approx(10.0)
        assert vehicle.a_y == pytest.approx(2.0)

    def test_rejects_non_positive_mass(self, make_vehicle):
        """Test mass must be positive."""
        with pytest.raises(ValueError, match="mass"):
            make_vehicle(mass=0.0)

    def test_rejects_negative_speed(self, make_vehicle):
        """Test speed must be non-negative."""
        with pytest.raises(ValueError, match="speed"):
            make_vehicle(speed=-1.0)

    def test_rejects_non_positive_size(self, make_vehicle):
        """Test length and width must be positive."""
        with pytest.raises(ValueError, match="length"):
            make_vehicle(length=0.0)
        with pytest.raises(ValueError, match="width"):
            make_vehicle(width=-1.0)

    def test_to_dict_round_trip(self, make_vehicle):
        """Test VehicleState survives to_dict and from_dict."""
        vehicle = make_vehicle(x=3.0, y=1.75, vclass=VehicleClass.HEAVY, mass=20000.0)
        data = vehicle.to_dict()
        assert data["vclass"] == "heavy"
        assert VehicleState.from_dict(data) == vehicle


class TestBranch:
    """Tests for Branch enum."""

    def test_order_and_labels(self):
        """Test the branch indices and their labels."""
        assert [b.label for b in Branch] == ["leftchange", "following", "rightchange"]
        assert int(Branch.FOLLOWING) == 1


class TestHybridAction:
    """Tests for HybridAction model."""

    def test_to_dict_uses_label(self):
        """Test serialization writes the branch label."""
        action = HybridAction(branch=Branch.LEFT_CHANGE, a_vertical=1.0, a_lateral=0.5)
        assert action.to_dict() == {"branch": "leftchange", "a_vertical": 1.0, "a_lateral": 0.5}

    def test_from_dict_accepts_label_or_index(self):
        """Test deserialization from a label or an integer."""
        by_label = HybridAction.from_dict({"branch": "rightchange", "a_vertical": 0, "a_lateral": 0})
        by_index = HybridAction.from_dict({"branch": 2, "a_vertical": 0, "a_lateral": 0})
        assert by_label.branch is Branch.RIGHT_CHANGE
        assert by_index.branch is Branch.RIGHT_CHANGE


class TestObservation:
    """Tests for Observation model."""

    def test_flat_has_43_entries(self):
        """Test the flat vector has six 6-blocks plus the 7-entry OV block."""
        assert OBS_DIM == 43
        assert Observation().flat().shape == (43,)

    def test_rejects_wrong_shapes(self):
        """Test block shapes are validated."""
        with pytest.raises(ValueError, match="sv_blocks"):
            Observation(sv_blocks=np.zeros((5, 6)))
        with pytest.raises(ValueError, match="ov_block"):
            Observation(ov_block=np.zeros(6))

    def test_to_array_normalizes(self):
        """Test distances, speeds, acceleration and offset are scaled."""
        sv = np.zeros((6, 6))
        sv[2] = [25.0, 0.0, -10.0, 0.0, 0.0, 1.0]
        ov = np.array([20.0, 0.0, 1.5, 0.875, 0.0, 1.0, 0.0])
        scales = ObservationScales(distance=50.0, speed=20.0, acceleration=3.0, position=1.75)
        array = Observation(sv_blocks=sv, ov_block=ov).to_array(scales)
        assert array[12:18].tolist() == [0.5, 0.0, -0.5, 0.0, 0.0, 1.0]
        assert array[36:40].tolist() == [1.0, 0.0, 0.5, 0.5]

    def test_to_dict_round_trip(self):
        """Test Observation survives to_dict and from_dict."""
        sv = np.arange(36, dtype=float).reshape(6, 6)
        obs = Observation(sv_blocks=sv, ov_block=np.ones(7))
        restored = Observation.from_dict(obs.to_dict())
        np.testing.assert_array_equal(restored.flat(), obs.flat())


class TestRewardBreakdown:
    """Tests for RewardBreakdown model."""

    def test_from_dict_ignores_extra_keys(self):
        """Test unknown keys in a dictionary are skipped."""
        data = {
            "r_risk": -0.1,
            "r_vertical": 1.0,
            "r_position": 0.0,
            "r_limit": 0.0,
            "r_collision": 0.0,
            "total": 0.9,
            "speeding_flag": 0,
            "unrelated": 5,
        }
        reward = RewardBreakdown.from_dict(data)
        assert reward.total == 0.9
        assert reward.adr == 0.0


class TestStepEvents:
    """Tests for StepEvents model."""

    def test_to_dict_round_trip(self):
        """Test collision pairs come back as tuples."""
        events = StepEvents(collisions=[(1, 2)], despawned=[3], off_road=[4])
        restored = StepEvents.from_dict(events.to_dict())
        assert restored.collisions == [(1, 2)]
        assert restored.off_road == [4]


class TestTrajectoryRecord:
    """Tests for TrajectoryRecord model."""

    def test_to_state_recovers_heading(self):
        """Test heading and acceleration are rebuilt from the components."""
        record = TrajectoryRecord(
            frame=0,
            vehicle_id=1,
            x=0.0,
            y=0.0,
            v_x=3.0,
            v_y=4.0,
            a_x=0.6,
            a_y=0.8,
            lane=0,
            vclass=VehicleClass.LIGHT,
            mass=1500.0,
            length=4.5,
            width=1.8,
        )
        state = record.to_state()
        assert state.speed == pytest.approx(5.0)
        assert state.heading == pytest.approx(math.atan2(4.0, 3.0))
        assert state.acceleration == pytest.approx(1.0)

    def test_stationary_record_has_zero_heading(self):
        """Test a zero velocity gives heading 0."""
        record = TrajectoryRecord(
            frame=0,
            vehicle_id=1,
            x=0.0,
            y=0.0,
            v_x=0.0,
            v_y=0.0,
            a_x=0.0,
            a_y=0.0,
            lane=0,
            vclass=VehicleClass.HEAVY,
            mass=20000.0,
            length=12.0,
            width=2.5,
        )
        assert record.to_state().heading == 0.0


class TestEpisodeLog:
    """Tests for EpisodeLog model."""

    def test_to_dict_round_trip(self, closing_log):
        """Test EpisodeLog survives to_dict and from_dict."""
        restored = EpisodeLog.from_dict(closing_log.to_dict())
        assert restored.subject_id == 0
        assert restored.frame_rate == 10.0
        assert restored.records == closing_log.records


class TestConflictEvent:
    """Tests for ConflictEvent model."""

    def test_rejects_empty_trigger(self):
        """Test a conflict needs at least one trigger."""
        with pytest.raises(ValueError, match="trigger"):
            ConflictEvent(time=0.0, pair=(0, 1), trigger=frozenset(), heavy_involved=False, pce=0.0)

    def test_rejects_negative_pce(self):
        """Test conflict energy cannot be negative."""
        with pytest.raises(ValueError, match="pce"):
            ConflictEvent(time=0.0, pair=(0, 1), trigger=frozenset({"TTC"}), heavy_involved=False, pce=-1.0)

    def test_to_dict_round_trip(self):
        """Test the trigger set is joined and split back."""
        event = ConflictEvent(
            time=1.0,
            end_time=1.5,
            pair=(0, 7),
            trigger=frozenset({"TTC", "DRAC"}),
            heavy_involved=True,
            pce=1200.0,
            steps=6,
            other_class=VehicleClass.HEAVY,
        )
        data = event.to_dict()
        assert data["trigger"] == "DRAC|TTC"
        assert ConflictEvent.from_dict(data) == event


class TestEpisodeReport:
    """Tests for EpisodeReport model."""

    def test_to_dict_names_energy_in_joules(self):
        """Test PCEC is written as pcec_joules and read back."""
        report = EpisodeReport(
            avg_speed=20.0,
            lane_changes=1,
            collisions=0,
            conflicts=2,
            heavy_in_conflicts=1,
            light_in_conflicts=1,
            pcec=5000.0,
            mean_adr=0.3,
        )
        data = report.to_dict()
        assert data["pcec_joules"] == 5000.0
        assert EpisodeReport.from_dict(data) == report
