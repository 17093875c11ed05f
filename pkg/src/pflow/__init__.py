"""Principal flow and related continuous models of gradient descent.

Modules: ``numlin`` (eigensolvers), ``losses`` (objectives), ``flows``
(vector fields and stability diagnostics), ``integrate`` (simulation),
``optimize`` (GD, momentum and drift-adjusted learning rates),
``scenarios`` and ``cli`` (data-generating experiments).
"""

__version__ = "0.1.0"
