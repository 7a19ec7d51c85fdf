import numpy as np
import pandas as pd, scipy.linalg as la
import matplotlib.pyplot as plt
