from .kernels import EigenPairs, as_matrix, eig_real, kfold_split, ridge_from_gram, ridge_masked, solve_ols

__all__ = ['EigenPairs', 'as_matrix', 'eig_real', 'kfold_split', 'ridge_from_gram', 'ridge_masked', 'solve_ols']
