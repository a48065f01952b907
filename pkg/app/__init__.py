# Homodyne tomography toolkit
