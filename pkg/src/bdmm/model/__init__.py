from .intensities import CappedConstant, Constant, Intensity, PerCapita, make_intensity
from .kernels import (BirthKernel, ColocalizationBirth, GaussianMixtureBirth, PotentialBirth,
                      TransitionMatrixMutation, UniformBirth, UniformDeath, make_birth_kernel,
                      make_death_kernel, make_mutation_kernel)
from .moves import IndependentPerLabel, Langevin, Move, make_move
from .refs import Ref
from .spec import (COMPONENTS, KINDS, ModelSpec, initial_configuration, load_model,
                   model_from_config, params_from_config, params_to_config)
