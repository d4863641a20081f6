# Entraînement des débruiteurs et métriques de qualité
