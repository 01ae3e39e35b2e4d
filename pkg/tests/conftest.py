import os
import sys

import numpy as np
import pytest

# 添加項目根目錄到 Python 路徑
sys.path.append(os.path.join(os.path.dirname(__file__), '..'))

from src.mssfs.core.models.model import FeedbackSpec, InitialCondition, ModelSpec, SwitchSpec
from src.mssfs.core.services.simulation import StudyDesign, design_parameters, simulate_study
from src.mssfs.core.services.templates import TemperatureTemplate


def make_scalar_model(
    v=0.2,
    g=(0.6, 0.8),
    w=(0.1, 0.3),
    gamma=(0.0, 1.0),
    alpha=(-2.0, 1.0),
    zeta=(0.0, 0.0),
    init_mean=(0.0, 0.0),
    init_var=(1.0, 1.0),
    prob0=1.0,
    d=0,
    beta=None,
    feedback=None,
):
    """純量兩 regime 模型"""
    return ModelSpec(
        p=1,
        q=1,
        F=[[1.0]],
        V=[[v]],
        gamma=[[gamma[0]], [gamma[1]]],
        G=[[[g[0]]], [[g[1]]]],
        W=[[[w[0]]], [[w[1]]]],
        switch=SwitchSpec(
            alpha=list(alpha),
            beta=np.zeros((2, d)) if beta is None else beta,
            zeta=list(zeta),
            feedback=feedback or FeedbackSpec(),
        ),
        init=InitialCondition(
            mean=[[init_mean[0]], [init_mean[1]]],
            cov=[[[init_var[0]]], [[init_var[1]]]],
            prob0=prob0,
        ),
    )


def make_bivariate_model(alpha=(-1.0, 0.5)):
    """p = 2、q = 2 的模型，用於一般（非純量）更新路徑"""
    return ModelSpec(
        p=2,
        q=2,
        F=[[1.0, 0.0], [0.5, 1.0]],
        V=[[0.3, 0.05], [0.05, 0.2]],
        gamma=[[0.0, 0.0], [1.0, -0.5]],
        G=[[[0.7, 0.1], [0.0, 0.5]], [[0.4, 0.0], [0.2, 0.6]]],
        W=[[[0.1, 0.0], [0.0, 0.1]], [[0.3, 0.1], [0.1, 0.2]]],
        switch=SwitchSpec(alpha=list(alpha), beta=np.zeros((2, 0)), zeta=[0.0, 0.0]),
        init=InitialCondition(
            mean=[[0.0, 0.0], [1.0, 1.0]],
            cov=[[[1.0, 0.0], [0.0, 1.0]], [[0.5, 0.0], [0.0, 0.5]]],
            prob0=0.7,
        ),
    )


@pytest.fixture
def scalar_model():
    """純量兩 regime 模型工廠"""
    return make_scalar_model


@pytest.fixture
def bivariate_model():
    return make_bivariate_model()


@pytest.fixture
def temperature_template():
    """溫度預設模板（male、age 兩個共變數）"""
    return TemperatureTemplate(2)


@pytest.fixture
def positive_design():
    """小型正回饋模擬設計"""
    return StudyDesign(setting="positive_feedback", m=4, n=25, seed=11)


@pytest.fixture
def true_params(positive_design):
    return design_parameters(positive_design)


@pytest.fixture
def small_dataset(positive_design):
    """4 位受試者、每位 25 期的模擬資料"""
    return simulate_study(positive_design).to_dataset()
