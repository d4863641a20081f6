# Estimation de la variance du bruit à partir des seules observations
