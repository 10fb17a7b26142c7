# EP-ABC - expectation propagation with local ABC moment estimates
