"""Shared fixtures: small grids that solve in milliseconds.

The full benchmark feeder only appears in the acceptance tests; everything
else runs on one- and two-node systems where closed forms are available.
"""
import math

import numpy as np
import pytest

from phgrid.components import (DguParams, LineParams, LoadModel, ZipParams)
from phgrid.controllers import (IdaPbcGains, SaturationLimits,
                                VoltageReference, pi_gains_from_scalars)
from phgrid.network import ControllerSpec, DguSpec, LineSpec, MicrogridGraph

OMEGA0 = 2.0 * math.pi * 50.0


def make_plant(local_load: LoadModel | None = None) -> DguParams:
    return DguParams(R_t=0.1, L_t=1.8e-3, C_t=25e-6, omega0=OMEGA0,
                     local_load=local_load)


def ida_gains() -> IdaPbcGains:
    return IdaPbcGains(alpha11=-5.0, alpha22=-5.0, nu11=1.0, nu22=1.0,
                       kI1=100.0, kI2=100.0)


def zip_load_1() -> LoadModel:
    """The benchmark's node-1 draw: 75 uS / 0.3 A / 6 kW on both axes."""
    return LoadModel(kind="zip",
                     params=ZipParams(Y_p=75e-6, Y_q=75e-6, I_p=0.3, I_q=0.3,
                                      P_p=6000.0, P_q=6000.0),
                     v_floor=20.0)


def line_params(km: float) -> LineParams:
    return LineParams(r_per_km=0.343, l_per_km=0.875e-3, c_per_km=151.7e-9,
                      length=km)


@pytest.fixture
def single_ida_graph():
    """One passivity-controlled DGU, no lines, no loads."""
    ref = VoltageReference(Vd_ref=16000.0, Vq_ref=13000.0)
    ctl = ControllerSpec(kind="ida_pbc", ref=ref, ida_gains=ida_gains())
    dgu = DguSpec(node=3, plant=make_plant(), controller=ctl)
    return MicrogridGraph(dgus={3: dgu}, load_nodes={}, lines={})


@pytest.fixture
def single_pi_graph():
    """One PI-controlled DGU (sign-corrected proportional block)."""
    plant = make_plant()
    ref = VoltageReference(Vd_ref=18000.0, Vq_ref=11000.0)
    ctl = ControllerSpec(kind="pi", ref=ref,
                         pi_gains=pi_gains_from_scalars(1000.0, 1000.0,
                                                        plant))
    dgu = DguSpec(node=1, plant=plant, controller=ctl)
    return MicrogridGraph(dgus={1: dgu}, load_nodes={}, lines={})


@pytest.fixture
def dgu_load_graph():
    """One DGU feeding one lone-standing ZIP node through one line."""
    ref = VoltageReference(Vd_ref=16000.0, Vq_ref=13000.0)
    ctl = ControllerSpec(kind="ida_pbc", ref=ref, ida_gains=ida_gains())
    dgu = DguSpec(node=3, plant=make_plant(), controller=ctl)
    return MicrogridGraph(
        dgus={3: dgu},
        load_nodes={7: zip_load_1()},
        lines={12: LineSpec(tail=3, head=7, params=line_params(2.8))},
    )


@pytest.fixture
def two_dgu_graph():
    """Two passivity-controlled DGUs joined by a short line."""
    gains = ida_gains()
    lim = SaturationLimits(Vd_sat=30e3, Vq_sat=30e3)
    a = DguSpec(node=2, plant=make_plant(),
                controller=ControllerSpec(
                    kind="ida_pbc", ida_gains=gains, limits=lim,
                    ref=VoltageReference(Vd_ref=17000.0, Vq_ref=12000.0)))
    b = DguSpec(node=5, plant=make_plant(),
                controller=ControllerSpec(
                    kind="ida_pbc", ida_gains=gains, limits=lim,
                    ref=VoltageReference(Vd_ref=14000.0, Vq_ref=15000.0)))
    return MicrogridGraph(
        dgus={2: a, 5: b},
        load_nodes={},
        lines={16: LineSpec(tail=2, head=5, params=line_params(1.3))},
    )
