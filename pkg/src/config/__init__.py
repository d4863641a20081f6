# Configuration de l'application DPLD
