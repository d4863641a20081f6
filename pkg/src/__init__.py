# Débruitage non supervisé par débruiteurs partiellement linéaires (DPLD)
# Version: 1.0.0
# Date: Octobre 2026
