"""
rematsched schedules the re-materialisation of activations when training a
network within a memory budget. A forward graph is cut into a chain of
blocks at its separators, a menu of options is solved for each class of
identical blocks, and a dynamic program over the chain picks the fastest
sequence of options that fits the budget.

The main entrypoints are:

.. autofunction:: rematsched.run_solve
.. autofunction:: rematsched.run_sweep
.. autofunction:: rematsched.simulate

The building blocks are documented per submodule:

rematsched.partition
--------------------

.. automodule:: rematsched.partition

rematsched.block_ilp
--------------------

.. automodule:: rematsched.block_ilp

rematsched.ilp_solver
---------------------

.. automodule:: rematsched.ilp_solver

rematsched.chain_dp
-------------------

.. automodule:: rematsched.chain_dp

rematsched.simulate
-------------------

.. automodule:: rematsched.simulate

rematsched.ingest
-----------------

.. automodule:: rematsched.ingest

"""

from . import (
    block_ilp,
    chain_dp,
    errors,
    ilp_solver,
    ingest,
    model,
    partition,
    pipeline,
    simulate,
    transforms,
)

__all__ = (
    *block_ilp.__all__,
    *chain_dp.__all__,
    *errors.__all__,
    *ilp_solver.__all__,
    *ingest.__all__,
    *model.__all__,
    *partition.__all__,
    *pipeline.__all__,
    *simulate.__all__,
    *transforms.__all__,
)

from .block_ilp import *
from .chain_dp import *
from .errors import *
from .ilp_solver import *
from .ingest import *
from .model import *
from .partition import *
from .pipeline import *
from .simulate import *
from .transforms import *
