# Différentiation automatique, modèle débruiteur et optimiseur Adam
