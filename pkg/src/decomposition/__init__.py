# Décomposition de Monte-Carlo R(ŷ) = g(x) + L·n̂ + e
