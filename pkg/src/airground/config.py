"""Scenario configuration, dataset loaders, and the synthetic generator.

A scenario is one TOML file: network (CSV pair or grid spec), orders (CSV
or a seeded arrival process), charging stations, fleet, energy model,
model sizes, and an optional [train] table. Everything needed to build a
seeded WorldState lives here; the resolved configuration is echoed into
every output directory for provenance.

Seed streams are derived as SeedSequence([seed, k]) with fixed k per
purpose, so runs are reproducible and streams never collide.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .feasibility import EnergyModel
from .geo import Point, RoadNetwork
from .mdp import RewardWeights
from .world import Carrier, ChargingStation, Order, Uav, WorldState

EARTH_RADIUS_KM = 6371.0

# seed-stream tags
_STREAM_ORDERS = 1
_STREAM_PLACEMENT = 2
_STREAM_STATIONS = 3
STREAM_POLICY = 7


class ConfigError(Exception):
    """Invalid or inconsistent configuration; message carries the field path."""


def latlon_to_km(lat: float, lon: float, lat0: float, lon0: float) -> tuple[float, float]:
    """Equirectangular projection around a scenario centroid, in kilometers."""
    x = math.radians(lon - lon0) * EARTH_RADIUS_KM * math.cos(math.radians(lat0))
    y = math.radians(lat - lat0) * EARTH_RADIUS_KM
    return x, y


@dataclass
class GridSpec:
    rows: int = 4
    cols: int = 5
    spacing_km: float = 1.0


@dataclass
class OrderGenSpec:
    count: int | None = None
    arrival_rate: float | None = None  # expected orders per step
    demand_ratio: float | None = None  # orders per step = ratio * fleet size
    deadline_slack_min: int = 15
    deadline_slack_max: int = 40


@dataclass
class FleetSpec:
    n_uav: int = 6
    n_carrier: int = 6
    uav_speed_kmh: float = 60.0
    carrier_speed_kmh: float = 45.0
    uav_capacity_kwh: float = 1.0
    initial_battery: float = 1.0


@dataclass
class ModelSpec:
    hidden: int = 256
    heads: int = 4


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    t_max: int = 50
    n_max: int = 12
    mode: str = "mixed"  # mixed | uav_only | carrier_only
    base_dir: Path = field(default_factory=Path)
    nodes_path: str | None = None
    edges_path: str | None = None
    orders_path: str | None = None
    stations_path: str | None = None
    grid: GridSpec = field(default_factory=GridSpec)
    ordergen: OrderGenSpec = field(default_factory=OrderGenSpec)
    n_stations: int = 3
    fleet: FleetSpec = field(default_factory=FleetSpec)
    energy: EnergyModel = field(default_factory=EnergyModel)
    model: ModelSpec = field(default_factory=ModelSpec)

    # ------------------------------------------------------------------
    def validate(self) -> None:
        if self.t_max <= 0:
            raise ConfigError("t_max: must be positive")
        if self.n_max <= 0:
            raise ConfigError("n_max: must be positive")
        if self.mode not in ("mixed", "uav_only", "carrier_only"):
            raise ConfigError(f"mode: unknown mode {self.mode!r}")
        if self.fleet.uav_speed_kmh <= 0 or self.fleet.carrier_speed_kmh <= 0:
            raise ConfigError("fleet: speeds must be positive")
        if self.fleet.n_uav + self.fleet.n_carrier <= 0:
            raise ConfigError("fleet: need at least one vehicle")
        if not 0 < self.fleet.initial_battery <= 1:
            raise ConfigError("fleet.initial_battery: must lie in (0, 1]")
        n_uav, n_carrier = self.resolved_fleet_counts()
        if n_uav > 0 and self.n_stations <= 0 and self.stations_path is None:
            raise ConfigError("stations: UAVs require at least one charging station")
        og = self.ordergen
        if og.deadline_slack_min < 1 or og.deadline_slack_max < og.deadline_slack_min:
            raise ConfigError("orders.deadline_slack: invalid range")

    def resolved_fleet_counts(self) -> tuple[int, int]:
        """Fleet sizes after applying the mode switch (total size constant)."""
        total = self.fleet.n_uav + self.fleet.n_carrier
        if self.mode == "uav_only":
            return total, 0
        if self.mode == "carrier_only":
            return 0, total
        return self.fleet.n_uav, self.fleet.n_carrier

    def energy_model(self) -> EnergyModel:
        return self.energy

    def arch(self):
        from .neural import ArchConfig

        n_uav, n_carrier = self.resolved_fleet_counts()
        return ArchConfig(
            n_max=self.n_max,
            n_u=n_uav,
            n_c=n_carrier,
            hidden=self.model.hidden,
            heads=self.model.heads,
        )

    # ------------------------------------------------------------------
    def _resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / p

    def build_network(self) -> RoadNetwork:
        if self.nodes_path and self.edges_path:
            return RoadNetwork.from_csv(
                self._resolve(self.nodes_path), self._resolve(self.edges_path)
            )
        return make_grid_network(self.grid)

    def build_world(self, seed: int) -> WorldState:
        """Construct the initial seeded world for one episode."""
        self.validate()
        net = self.build_network()
        n_uav, n_carrier = self.resolved_fleet_counts()

        if self.orders_path:
            orders = load_orders_csv(self._resolve(self.orders_path))
        else:
            rng = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_ORDERS]))
            orders = generate_orders(
                self.ordergen, net, rng, self.t_max, n_uav + n_carrier
            )
        for o in orders:
            if o.origin not in net.points or o.destination not in net.points:
                raise ConfigError(f"orders: order {o.id} references unknown node")

        if self.stations_path:
            stations = load_stations_csv(self._resolve(self.stations_path))
        else:
            rng = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_STATIONS]))
            node_ids = np.array(net.node_ids)
            pick = rng.choice(len(node_ids), size=min(self.n_stations, len(node_ids)), replace=False)
            stations = [
                ChargingStation(i, net.point_of(int(node_ids[j])))
                for i, j in enumerate(sorted(pick))
            ]
        if n_uav > 0 and not stations:
            raise ConfigError("stations: UAVs require at least one charging station")

        rng = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_PLACEMENT]))
        node_ids = net.node_ids
        uavs = []
        for i in range(n_uav):
            nid = node_ids[int(rng.integers(len(node_ids)))]
            uavs.append(
                Uav(
                    id=i,
                    location=net.point_of(nid),
                    speed=self.fleet.uav_speed_kmh,
                    battery=self.fleet.initial_battery,
                    battery_capacity=self.fleet.uav_capacity_kwh,
                )
            )
        carriers = []
        for i in range(n_carrier):
            nid = node_ids[int(rng.integers(len(node_ids)))]
            carriers.append(
                Carrier(id=i, location_node=nid, speed=self.fleet.carrier_speed_kmh)
            )

        state = WorldState(
            clock=0,
            t_max=self.t_max,
            net=net,
            orders=orders,
            uavs=uavs,
            carriers=carriers,
            stations=stations,
        )
        from .engine import _refresh_stats

        _refresh_stats(state)
        return state

    def echo(self, out_dir: str | Path) -> None:
        """Write the fully resolved configuration for provenance."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        payload = dataclasses.asdict(self)
        payload["base_dir"] = str(self.base_dir)
        with open(out / "resolved_config.json", "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")


# ----------------------------------------------------------------------
# Builders
# ----------------------------------------------------------------------


def make_grid_network(grid: GridSpec) -> RoadNetwork:
    """Rectangular grid; node id = row * cols + col, unit edges = spacing."""
    if grid.rows < 1 or grid.cols < 1 or grid.spacing_km <= 0:
        raise ConfigError("network.grid: invalid dimensions")
    nodes = []
    edges = []
    for r in range(grid.rows):
        for c in range(grid.cols):
            nid = r * grid.cols + c
            nodes.append((nid, Point(c * grid.spacing_km, r * grid.spacing_km)))
            if c + 1 < grid.cols:
                edges.append((nid, nid + 1, grid.spacing_km, True))
            if r + 1 < grid.rows:
                edges.append((nid, nid + grid.cols, grid.spacing_km, True))
    return RoadNetwork(nodes, edges)


def generate_orders(
    spec: OrderGenSpec,
    net: RoadNetwork,
    rng: np.random.Generator,
    t_max: int,
    fleet_size: int,
) -> list[Order]:
    """Seeded synthetic order book.

    With an explicit count, release steps are uniform over the first 80%
    of the horizon; otherwise arrivals follow a per-step Poisson process
    whose rate comes from arrival_rate or demand_ratio * fleet size.
    """
    node_ids = net.node_ids
    if len(node_ids) < 2:
        raise ConfigError("orders: need at least two nodes to sample endpoints")
    release_cap = max(1, int(0.8 * t_max))

    releases: list[int] = []
    if spec.count is not None:
        releases = sorted(int(rng.integers(0, release_cap)) for _ in range(spec.count))
    else:
        rate = spec.arrival_rate
        if rate is None and spec.demand_ratio is not None:
            rate = spec.demand_ratio * fleet_size
        if rate is None:
            rate = 0.3
        for t in range(release_cap):
            releases.extend([t] * int(rng.poisson(rate)))

    orders = []
    for i, rel in enumerate(releases):
        origin = int(node_ids[int(rng.integers(len(node_ids)))])
        dest = int(node_ids[int(rng.integers(len(node_ids)))])
        while dest == origin:
            dest = int(node_ids[int(rng.integers(len(node_ids)))])
        slack = int(rng.integers(spec.deadline_slack_min, spec.deadline_slack_max + 1))
        orders.append(
            Order(id=i, origin=origin, destination=dest, release_time=rel, deadline=rel + slack)
        )
    return orders


# ----------------------------------------------------------------------
# CSV I/O (documented schemas)
# ----------------------------------------------------------------------


def load_orders_csv(path: str | Path) -> list[Order]:
    """Header: order_id,origin_node,dest_node,release_step,deadline_step"""
    orders = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            try:
                orders.append(
                    Order(
                        id=int(row["order_id"]),
                        origin=int(row["origin_node"]),
                        destination=int(row["dest_node"]),
                        release_time=int(row["release_step"]),
                        deadline=int(row["deadline_step"]),
                    )
                )
            except (KeyError, ValueError) as e:
                raise ConfigError(f"orders csv {path}: bad row {row}: {e}") from e
    return orders


def write_orders_csv(orders: list[Order], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["order_id", "origin_node", "dest_node", "release_step", "deadline_step"])
        for o in orders:
            w.writerow([o.id, o.origin, o.destination, o.release_time, o.deadline])


def load_stations_csv(path: str | Path) -> list[ChargingStation]:
    """Header: station_id,x_km,y_km"""
    stations = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            try:
                stations.append(
                    ChargingStation(
                        int(row["station_id"]),
                        Point(float(row["x_km"]), float(row["y_km"])),
                    )
                )
            except (KeyError, ValueError) as e:
                raise ConfigError(f"stations csv {path}: bad row {row}: {e}") from e
    return stations


def write_stations_csv(stations: list[ChargingStation], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["station_id", "x_km", "y_km"])
        for s in stations:
            w.writerow([s.id, repr(s.location.x), repr(s.location.y)])


# ----------------------------------------------------------------------
# TOML loading
# ----------------------------------------------------------------------


def _apply_table(obj, table: dict, path: str, renames: dict[str, str] | None = None):
    renames = renames or {}
    valid = {f.name for f in dataclasses.fields(obj)}
    for key, value in table.items():
        attr = renames.get(key, key)
        if attr not in valid:
            raise ConfigError(f"{path}.{key}: unknown key")
        setattr(obj, attr, value)


@dataclass
class AppConfig:
    scenario: ScenarioConfig
    reward: RewardWeights
    train: dict  # raw [train] table; the trainer applies its defaults


def load_config(path: str | Path) -> AppConfig:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"config {path}: {e}") from e

    sc = ScenarioConfig(base_dir=path.parent.resolve())
    for key in ("name", "t_max", "n_max", "mode"):
        if key in raw:
            setattr(sc, key, raw[key])

    net = raw.get("network", {})
    for key, value in net.items():
        if key == "nodes":
            sc.nodes_path = value
        elif key == "edges":
            sc.edges_path = value
        elif key == "grid_rows":
            sc.grid.rows = value
        elif key == "grid_cols":
            sc.grid.cols = value
        elif key == "grid_spacing_km":
            sc.grid.spacing_km = value
        else:
            raise ConfigError(f"network.{key}: unknown key")

    orders = dict(raw.get("orders", {}))
    if "path" in orders:
        sc.orders_path = orders.pop("path")
    _apply_table(sc.ordergen, orders, "orders")

    stations = raw.get("stations", {})
    for key, value in stations.items():
        if key == "path":
            sc.stations_path = value
        elif key == "count":
            sc.n_stations = value
        else:
            raise ConfigError(f"stations.{key}: unknown key")

    _apply_table(sc.fleet, raw.get("fleet", {}), "fleet")
    _apply_table(
        sc.energy,
        raw.get("energy", {}),
        "energy",
        renames={"eta_kwh_per_km": "eta"},
    )
    _apply_table(sc.model, raw.get("model", {}), "model")

    reward = RewardWeights()
    _apply_table(reward, raw.get("reward", {}), "reward")
    try:
        sc.energy = dataclasses.replace(sc.energy)  # re-run range validation
        reward = dataclasses.replace(reward)
    except ValueError as e:
        raise ConfigError(str(e)) from e

    known = {
        "name", "t_max", "n_max", "mode", "network", "orders", "stations",
        "fleet", "energy", "model", "reward", "train",
    }
    for key in raw:
        if key not in known:
            raise ConfigError(f"{key}: unknown table or key")

    sc.validate()
    return AppConfig(scenario=sc, reward=reward, train=dict(raw.get("train", {})))
