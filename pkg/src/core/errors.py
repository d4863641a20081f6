# Hiérarchie des exceptions de l'application
from typing import Any, Dict, Optional


class RestorationError(Exception):
    """Erreur de base de l'application"""


class ParameterError(RestorationError, ValueError):
    """Paramètre invalide (forme, signe, plage)"""


class FormatError(RestorationError):
    """Fichier PGM ou PLDT mal formé"""


class ContractError(RestorationError):
    """Pré-condition d'une opération non respectée"""


class DomainError(RestorationError, ValueError):
    """Valeur hors du domaine de définition (ex. intensité négative en Poisson)"""


class EstimationError(RestorationError):
    """Estimation impossible faute de données exploitables"""


class FitError(RestorationError):
    """Ajustement linéaire dégénéré"""


class ConfigError(RestorationError):
    """Configuration d'exécution invalide"""


class NonFiniteGradientError(RestorationError):
    """Gradient NaN/Inf rencontré pendant une mise à jour Adam"""

    def __init__(self, message: str, parameter_names: Optional[list] = None):
        super().__init__(message)
        self.parameter_names = parameter_names or []


class TrainingDivergedError(RestorationError):
    """Perte non finie : l'entraînement est interrompu sur le dernier état valide"""

    def __init__(self, message: str, step: int, last_good_state: Dict[str, Any]):
        super().__init__(message)
        self.step = step
        self.last_good_state = last_good_state
