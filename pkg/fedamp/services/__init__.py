"""
Serviços numéricos do fedamp: objetivos, participação, motor FedAvg e análises.
"""

# Este arquivo é mantido vazio para evitar imports circulares.
# As importações devem ser feitas diretamente dos módulos específicos.
